//! Named parameter tensors, the Adam optimizer, and binary checkpoints.

use std::io::{Read, Write};

use super::tape::{Gradients, Tape, Var};
use super::ModelError;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Optimizer group, selects the learning rate.
    pub group: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>, group: usize) -> usize {
        assert_eq!(data.len(), rows * cols, "tensor `{name}` shape");
        assert!(self.find(name).is_none(), "duplicate tensor `{name}`");
        self.tensors.push(Tensor { name: name.to_string(), rows, cols, data, group, trainable: true });
        self.tensors.len() - 1
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// All parameters concatenated in tensor order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.n_scalars() {
            return Err(ModelError::ShapeMismatch(format!(
                "flat vector has {} entries, store has {}",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Gradient flattened in the same order as [`ParamStore::flat`]; absent
    /// or frozen entries are zero.
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for (id, t) in self.tensors.iter().enumerate() {
            match grads.get(id) {
                Some(g) if t.trainable => out.extend_from_slice(g),
                _ => out.extend(std::iter::repeat_n(0.0, t.data.len())),
            }
        }
        out
    }

    /// Records tensor `id` on `tape`; frozen tensors become constants.
    pub fn leaf(&self, tape: &mut Tape, id: usize) -> Var {
        let t = &self.tensors[id];
        if t.trainable {
            tape.param(id, t.rows, t.cols, &t.data)
        } else {
            tape.constant(t.rows, t.cols, t.data.clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    /// Learning rate per parameter group.
    pub lrs: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
}

impl AdamConfig {
    pub fn new(lrs: Vec<f64>) -> Self {
        Self { lrs, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, grad_clip: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self { config, first_moment: zeros.clone(), second_moment: zeros, step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected update. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), ModelError> {
        if store.len() != self.first_moment.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "optimizer tracks {} tensors, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        for (id, t) in store.iter().enumerate() {
            if let Some(g) = grads.get(id) {
                if g.len() != t.data.len() {
                    return Err(ModelError::ShapeMismatch(format!(
                        "gradient for `{}` has {} entries, expected {}",
                        t.name,
                        g.len(),
                        t.data.len()
                    )));
                }
            }
            if t.group >= self.config.lrs.len() {
                return Err(ModelError::ShapeMismatch(format!(
                    "tensor `{}` in group {} but only {} learning rates",
                    t.name,
                    t.group,
                    self.config.lrs.len()
                )));
            }
        }
        let scale = match self.config.grad_clip {
            Some(max_norm) => {
                let norm = (0..store.len())
                    .filter(|&id| store.get(id).trainable)
                    .filter_map(|id| grads.get(id))
                    .flat_map(|g| g.iter())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step_count += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step_count as i32);
        for id in 0..store.len() {
            let t = store.get_mut(id);
            if !t.trainable {
                continue;
            }
            let lr = c.lrs[t.group];
            let g = grads.get(id);
            let (m, v) = (&mut self.first_moment[id], &mut self.second_moment[id]);
            for j in 0..t.data.len() {
                let gj = g.map_or(0.0, |g| g[j] * scale);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                t.data[j] -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"GFLWCKPT";
const VERSION: u32 = 1;

/// Writes every tensor of `store` with the config hash it was trained under.
pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, config_hash: &str) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::Checkpoint(e.to_string());
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    write_bytes(&mut w, config_hash.as_bytes()).map_err(io)?;
    w.write_all(&(store.len() as u64).to_le_bytes()).map_err(io)?;
    for t in store.iter() {
        write_bytes(&mut w, t.name.as_bytes()).map_err(io)?;
        w.write_all(&(t.rows as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(t.cols as u64).to_le_bytes()).map_err(io)?;
        for x in &t.data {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

/// Loads tensors into `store`, which must already have the same names and
/// shapes; refuses checkpoints written under a different config hash.
pub fn read_checkpoint<R: Read>(mut r: R, store: &mut ParamStore, config_hash: &str) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::Checkpoint(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = String::from_utf8(read_bytes(&mut r).map_err(io)?)
        .map_err(|_| ModelError::Checkpoint("hash is not utf-8".into()))?;
    if hash != config_hash {
        return Err(ModelError::ConfigHashMismatch { expected: config_hash.to_string(), found: hash });
    }
    let count = read_u64(&mut r).map_err(io)? as usize;
    if count != store.len() {
        return Err(ModelError::ShapeMismatch(format!("checkpoint has {count} tensors, model has {}", store.len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut r).map_err(io)?)
            .map_err(|_| ModelError::Checkpoint("tensor name is not utf-8".into()))?;
        let rows = read_u64(&mut r).map_err(io)? as usize;
        let cols = read_u64(&mut r).map_err(io)? as usize;
        let id = store.find(&name).ok_or_else(|| ModelError::ShapeMismatch(format!("unknown tensor `{name}`")))?;
        let t = store.get(id);
        if (t.rows, t.cols) != (rows, cols) {
            return Err(ModelError::ShapeMismatch(format!(
                "tensor `{name}` is {rows}x{cols} in checkpoint, {}x{} in model",
                t.rows, t.cols
            )));
        }
        let mut data = vec![0.0; rows * cols];
        let mut buf = [0u8; 8];
        for x in &mut data {
            r.read_exact(&mut buf).map_err(io)?;
            *x = f64::from_le_bytes(buf);
        }
        loaded.push((id, data));
    }
    for (id, data) in loaded {
        store.get_mut(id).data = data;
    }
    Ok(())
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "field too long"));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}
