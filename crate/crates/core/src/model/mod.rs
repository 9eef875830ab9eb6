//! Trainable policies (tabular or MLP) over an environment's action layout.
//!
//! Every model emits one row per queried state laid out as
//! `[forward slots | backward slots | state flow]`, where the backward block
//! exists only for learned backward policies and the state-flow column only
//! when the objective needs it. The log total flow is a separate scalar in
//! its own optimizer group.

pub mod params;
pub mod tape;

pub use params::{read_checkpoint, write_checkpoint, Adam, AdamConfig, ParamStore, Tensor};
pub use tape::{logsumexp, Gradients, Tape, TapeError, Var};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{PolicyTable, StateId};
use crate::envs::Env;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("the sink has no children")]
    SinkHasNoChildren,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for config {found}, expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    #[serde(default = "default_slope")]
    pub negative_slope: f64,
}

fn default_slope() -> f64 {
    0.01
}

impl MlpSpec {
    pub fn new(hidden_layers: usize, hidden_width: usize) -> Self {
        Self { hidden_layers, hidden_width, negative_slope: default_slope() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelKind {
    Tabular,
    Mlp(MlpSpec),
}

/// What the forward block of the output row means.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Logits of the forward policy.
    Policy,
    /// Log edge flows; the flow into the sink is the reward, not a parameter.
    EdgeFlow,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub mode: HeadMode,
    pub forward_width: usize,
    /// Zero when the backward policy is uniform.
    pub backward_width: usize,
    pub state_flow: bool,
    pub total_flow: bool,
}

impl HeadLayout {
    pub fn out_width(&self) -> usize {
        self.forward_width + self.backward_width + usize::from(self.state_flow)
    }

    pub fn backward_offset(&self) -> usize {
        self.forward_width
    }

    pub fn state_flow_col(&self) -> Option<usize> {
        self.state_flow.then_some(self.forward_width + self.backward_width)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Net {
    Table(usize),
    /// (weight, bias) per layer; the first weight is indexed by sparse features.
    Mlp {
        layers: Vec<(usize, usize)>,
        slope: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    kind: ModelKind,
    heads: HeadLayout,
    store: ParamStore,
    net: Net,
    log_z: Option<usize>,
}

/// Optimizer group of the network or table.
pub const NET_GROUP: usize = 0;
/// Optimizer group of the log total flow.
pub const TOTAL_FLOW_GROUP: usize = 1;

impl PolicyModel {
    pub fn new<R: Rng>(kind: ModelKind, heads: HeadLayout, env: &Env, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let out = heads.out_width();
        let net = match &kind {
            ModelKind::Tabular => {
                let n = env.dag.n_states();
                Net::Table(store.add("table", n, out, vec![0.0; n * out], NET_GROUP))
            }
            ModelKind::Mlp(spec) => {
                let mut dims = vec![env.feature_dim];
                dims.extend(std::iter::repeat_n(spec.hidden_width, spec.hidden_layers));
                dims.push(out);
                let layers = dims
                    .windows(2)
                    .enumerate()
                    .map(|(i, d)| {
                        let (fan_in, fan_out) = (d[0], d[1]);
                        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                        let mut uniform =
                            |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-bound..=bound)).collect() };
                        let w = uniform(fan_in * fan_out);
                        let b = uniform(fan_out);
                        (
                            store.add(&format!("layer{i}.weight"), fan_in, fan_out, w, NET_GROUP),
                            store.add(&format!("layer{i}.bias"), 1, fan_out, b, NET_GROUP),
                        )
                    })
                    .collect();
                Net::Mlp { layers, slope: spec.negative_slope }
            }
        };
        let log_z = heads.total_flow.then(|| store.add("log_total_flow", 1, 1, vec![0.0], TOTAL_FLOW_GROUP));
        Self { kind, heads, store, net, log_z }
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn heads(&self) -> &HeadLayout {
        &self.heads
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameter id of the log total flow, if present.
    pub fn log_z_param(&self) -> Option<usize> {
        self.log_z
    }

    /// Parameter id of the tabular table, if tabular.
    pub fn table_param(&self) -> Option<usize> {
        match self.net {
            Net::Table(id) => Some(id),
            Net::Mlp { .. } => None,
        }
    }

    /// Raw output rows for `states`.
    pub fn outputs(&self, tape: &mut Tape, env: &Env, states: &[StateId]) -> Var {
        match &self.net {
            Net::Table(id) => {
                let table = self.store.leaf(tape, *id);
                tape.gather_rows(table, states.iter().map(|s| s.index()).collect())
            }
            Net::Mlp { layers, slope } => {
                let rows: Vec<Vec<usize>> = states.iter().map(|s| env.features[s.index()].clone()).collect();
                let mut h = None;
                for (i, &(w, b)) in layers.iter().enumerate() {
                    let wv = self.store.leaf(tape, w);
                    let bv = self.store.leaf(tape, b);
                    let lin = match h {
                        None => tape.sparse_rows(wv, rows.clone()),
                        Some(x) => tape.matmul(x, wv),
                    };
                    let lin = tape.add_row_bias(lin, bv);
                    h = Some(if i + 1 < layers.len() { tape.leaky_relu(lin, *slope) } else { lin });
                }
                h.expect("an MLP has at least one layer")
            }
        }
    }

    pub fn log_z(&self, tape: &mut Tape) -> Option<Var> {
        self.log_z.map(|id| self.store.leaf(tape, id))
    }

    /// Logits the forward policy normalizes: the forward block, except that
    /// in edge-flow mode the sink slot carries `log R(s)`.
    pub fn forward_logits(&self, tape: &mut Tape, env: &Env, states: &[StateId], out: Var) -> Var {
        if self.heads.mode == HeadMode::Policy {
            return out;
        }
        let width = self.heads.out_width();
        let mut keep = vec![1.0; states.len() * width];
        let mut offset = vec![0.0; states.len() * width];
        for (r, &s) in states.iter().enumerate() {
            if let Some(slot) = env.layout.forward_slot(&env.dag, s, env.dag.sink()) {
                keep[r * width + slot] = 0.0;
                offset[r * width + slot] = env.dag.reward(s).ln();
            }
        }
        let kept = tape.scale(out, keep);
        tape.add_const(kept, offset)
    }

    /// Masked log forward policy, `states.len() x forward_width`.
    pub fn forward_log_probs(&self, tape: &mut Tape, env: &Env, states: &[StateId], out: Var) -> Var {
        let logits = self.forward_logits(tape, env, states, out);
        let mask = states.iter().flat_map(|&s| env.layout.forward_mask(s)).collect();
        tape.masked_log_softmax(logits, 0, self.heads.forward_width, mask)
    }

    /// Masked log backward policy, `states.len() x backward_width`; `None`
    /// for uniform backward policies.
    pub fn backward_log_probs(&self, tape: &mut Tape, env: &Env, states: &[StateId], out: Var) -> Option<Var> {
        if self.heads.backward_width == 0 {
            return None;
        }
        let mask = states.iter().flat_map(|&s| env.layout.backward_mask(s)).collect();
        let lo = self.heads.backward_offset();
        Some(tape.masked_log_softmax(out, lo, lo + self.heads.backward_width, mask))
    }

    /// Log forward probabilities of `states`, each aligned with its sorted child list.
    pub fn forward_rows(&self, env: &Env, states: &[StateId]) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.outputs(&mut tape, env, states);
        let lp = self.forward_log_probs(&mut tape, env, states, out);
        let v = tape.value(lp);
        let w = self.heads.forward_width;
        states
            .iter()
            .enumerate()
            .map(|(r, &s)| env.layout.forward_slots(s).iter().map(|&slot| v[r * w + slot as usize]).collect())
            .collect()
    }

    /// Log backward probabilities of `states`, each aligned with its sorted parent list.
    pub fn backward_rows(&self, env: &Env, states: &[StateId]) -> Vec<Vec<f64>> {
        if self.heads.backward_width == 0 {
            return states
                .iter()
                .map(|&s| {
                    let k = env.dag.parents(s).len();
                    vec![-(k as f64).ln(); k]
                })
                .collect();
        }
        let mut tape = Tape::new();
        let out = self.outputs(&mut tape, env, states);
        let lp = self.backward_log_probs(&mut tape, env, states, out).unwrap();
        let v = tape.value(lp);
        let w = self.heads.backward_width;
        states
            .iter()
            .enumerate()
            .map(|(r, &s)| env.layout.backward_slots(s).iter().map(|&slot| v[r * w + slot as usize]).collect())
            .collect()
    }

    /// Forward policy at `s` as `(child, probability)` pairs.
    pub fn forward_policy(&self, env: &Env, s: StateId) -> Result<Vec<(StateId, f64)>, ModelError> {
        if s == env.dag.sink() {
            return Err(ModelError::SinkHasNoChildren);
        }
        let row = self.forward_rows(env, &[s]).pop().unwrap();
        Ok(env.dag.children(s).iter().copied().zip(row.into_iter().map(f64::exp)).collect())
    }

    /// Forward policy at every state, in chunks to bound memory.
    pub fn policy_table(&self, env: &Env) -> PolicyTable {
        let n = env.dag.n_states();
        let states: Vec<StateId> = (0..n).map(StateId::from).filter(|&s| s != env.dag.sink()).collect();
        let mut log_probs = vec![Vec::new(); n];
        for chunk in states.chunks(4096) {
            for (s, row) in chunk.iter().zip(self.forward_rows(env, chunk)) {
                log_probs[s.index()] = row;
            }
        }
        PolicyTable { log_probs }
    }
}
