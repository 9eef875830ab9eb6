//! Bit sequences built word by word, rewarded by Hamming distance to a
//! target set.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionLayout, Env, EnvError, EnvKind};
use crate::dag::{FlowDagBuilder, StateId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitSeqSpec {
    /// Total number of bits.
    pub n: usize,
    /// Word length; must divide `n`.
    pub k: usize,
    /// Targets as `n`-bit integers, word `p` in bits `p*k .. (p+1)*k`.
    pub targets: Vec<u128>,
    /// Mode radius in bits.
    pub delta: u32,
    /// Reward exponent.
    pub beta: f64,
}

/// Partially filled sequence: one entry per word position.
pub type WordSeq = Vec<Option<u32>>;

impl BitSeqSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.k == 0 || self.n == 0 || !self.n.is_multiple_of(self.k) {
            return Err(EnvError::InvalidSpec(format!("word length {} must divide n = {}", self.k, self.n)));
        }
        if self.n > 128 || self.k > 16 {
            return Err(EnvError::InvalidSpec("n <= 128 and k <= 16 supported".into()));
        }
        if self.targets.is_empty() {
            return Err(EnvError::InvalidSpec("target set is empty".into()));
        }
        if self.targets.iter().any(|&t| self.n < 128 && t >> self.n != 0) {
            return Err(EnvError::InvalidSpec("target longer than n bits".into()));
        }
        if !(self.beta > 0.0) {
            return Err(EnvError::InvalidSpec("beta must be positive".into()));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.n / self.k
    }

    pub fn words(&self) -> u32 {
        1 << self.k
    }

    /// Digit base of the state encoding: empty plus every word.
    pub fn base(&self) -> u128 {
        (1u128 << self.k) + 1
    }

    pub fn n_states(&self) -> u128 {
        self.base().checked_pow(self.positions() as u32).map_or(u128::MAX, |v| v.saturating_add(1))
    }

    pub fn encode(&self, x: &[Option<u32>]) -> u128 {
        x.iter().rev().fold(0u128, |acc, w| acc * self.base() + w.map_or(0, |w| w as u128 + 1))
    }

    pub fn decode(&self, id: u128) -> WordSeq {
        let mut id = id;
        (0..self.positions())
            .map(|_| {
                let d = (id % self.base()) as u32;
                id /= self.base();
                d.checked_sub(1)
            })
            .collect()
    }

    /// Packs a complete sequence into an integer.
    pub fn pack(&self, x: &[Option<u32>]) -> Result<u128, EnvError> {
        let mut out = 0u128;
        for (p, w) in x.iter().enumerate() {
            let w = w.ok_or(EnvError::IncompleteSequence)?;
            out |= (w as u128) << (p * self.k);
        }
        Ok(out)
    }

    /// Distance to the nearest target; empty words count as fully mismatched.
    pub fn min_distance(&self, x: &[Option<u32>]) -> u32 {
        let mask = (1u128 << self.k) - 1;
        self.targets
            .iter()
            .map(|&t| {
                x.iter()
                    .enumerate()
                    .map(|(p, w)| match w {
                        Some(w) => (((t >> (p * self.k)) & mask) ^ *w as u128).count_ones(),
                        None => self.k as u32,
                    })
                    .sum()
            })
            .min()
            .unwrap_or(self.n as u32)
    }

    pub fn hex(&self, x: u128) -> String {
        format!("{:0width$x}", x, width = self.n.div_ceil(4))
    }
}

pub fn hamming(a: u128, b: u128) -> u32 {
    (a ^ b).count_ones()
}

pub fn bitseq_reward(x: &[Option<u32>], spec: &BitSeqSpec) -> Result<f64, EnvError> {
    if x.iter().any(Option::is_none) {
        return Err(EnvError::IncompleteSequence);
    }
    Ok((-spec.beta * spec.min_distance(x) as f64).exp())
}

/// Fills of one empty position with one word; a full sequence has none
/// (its only child is the sink).
pub fn bitseq_children(x: &[Option<u32>], spec: &BitSeqSpec) -> Vec<WordSeq> {
    let mut out = Vec::new();
    for p in 0..x.len() {
        if x[p].is_none() {
            for w in 0..spec.words() {
                let mut y = x.to_vec();
                y[p] = Some(w);
                out.push(y);
            }
        }
    }
    out
}

/// Single-position emptyings.
pub fn bitseq_parents(x: &[Option<u32>]) -> Vec<WordSeq> {
    (0..x.len())
        .filter(|&p| x[p].is_some())
        .map(|p| {
            let mut y = x.to_vec();
            y[p] = None;
            y
        })
        .collect()
}

/// `count` distinct `n`-bit targets drawn uniformly without replacement.
pub fn generate_targets<R: Rng>(n: usize, count: usize, rng: &mut R) -> Result<Vec<u128>, EnvError> {
    if n == 0 || n > 128 {
        return Err(EnvError::InvalidSpec("target length must be in 1..=128".into()));
    }
    if n <= 24 {
        let space = 1usize << n;
        if count > space {
            return Err(EnvError::InvalidSpec(format!("cannot draw {count} distinct {n}-bit targets")));
        }
        return Ok(sample(rng, space, count).into_iter().map(|v| v as u128).collect());
    }
    let mask = if n == 128 { u128::MAX } else { (1u128 << n) - 1 };
    let mut out: Vec<u128> = Vec::with_capacity(count);
    while out.len() < count {
        let v = rng.gen::<u128>() & mask;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Materializes every partial sequence. State ids are the digit encoding
/// of [`BitSeqSpec::encode`]; the sink takes the next id.
pub fn build_bitseq(spec: &BitSeqSpec) -> Result<Env, EnvError> {
    spec.validate()?;
    let total = spec.n_states();
    if total > 2_000_000 {
        return Err(EnvError::TooLarge(total));
    }
    let n_states = total as usize;
    let sink = StateId::from(n_states - 1);
    let m = spec.positions();
    let base = spec.base() as usize;
    let mut pow = vec![1usize; m];
    for p in 1..m {
        pow[p] = pow[p - 1] * base;
    }
    let mut b = FlowDagBuilder::new(n_states, StateId(0), sink);
    let mut features = Vec::with_capacity(n_states);
    let mut complete = Vec::new();
    for id in 0..n_states - 1 {
        let x = spec.decode(id as u128);
        let mut full = true;
        for p in 0..m {
            if x[p].is_none() {
                full = false;
                for w in 0..spec.words() as usize {
                    b.edge(id, id + (w + 1) * pow[p]);
                }
            }
        }
        if full {
            b.edge(StateId::from(id), sink);
            b.reward(id, bitseq_reward(&x, spec)?);
            complete.push((StateId::from(id), spec.pack(&x)?));
        } else {
            b.reward(id, (-spec.beta * spec.min_distance(&x) as f64).exp());
        }
        features.push(x.iter().enumerate().map(|(p, w)| p * base + w.map_or(0, |w| w as usize + 1)).collect());
    }
    features.push(Vec::new());
    let dag = b.build()?;
    let stop = (m << spec.k) as u32;
    let k = spec.k;
    let layout = ActionLayout::from_fns(
        &dag,
        |s, c| {
            if c == sink {
                return stop;
            }
            let diff = c.index() - s.index();
            let p = (0..m).rev().find(|&p| diff >= pow[p]).unwrap();
            let w = diff / pow[p] - 1;
            ((p << k) + w) as u32
        },
        |s, par| {
            let diff = s.index() - par.index();
            (0..m).rev().find(|&p| diff >= pow[p]).unwrap() as u32
        },
    );
    let modes = spec
        .targets
        .iter()
        .map(|&t| complete.iter().filter(|&&(_, x)| hamming(x, t) <= spec.delta).map(|&(s, _)| s).collect())
        .collect();
    Ok(Env {
        name: format!("bitseq_n{}_k{}", spec.n, spec.k),
        kind: EnvKind::BitSeq(spec.clone()),
        dag,
        layout,
        features,
        feature_dim: m * base,
        modes,
    })
}
