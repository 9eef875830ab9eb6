//! Evaluation metrics: exact and windowed L1 error, rank correlation, mode
//! discovery, and the CSV rows a run emits.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{exact_terminal_distribution, DagError, StateId};
use crate::envs::Env;
use crate::model::{logsumexp, PolicyModel};
use crate::sampling::{sample_backward_batch, SamplingError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} states is too many for exact evaluation")]
    TooLargeForExact(usize),
    #[error("empirical window is empty")]
    EmptyWindow,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("rank correlation needs at least two non-constant values")]
    DegenerateConstantInput,
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Largest state space evaluated exactly.
pub const EXACT_STATE_LIMIT: usize = 5_000_000;

/// Terminal distribution induced by the model's forward policy.
pub fn model_terminal_distribution(model: &PolicyModel, env: &Env) -> Result<BTreeMap<StateId, f64>> {
    if env.dag.n_states() > EXACT_STATE_LIMIT {
        return Err(MetricsError::TooLargeForExact(env.dag.n_states()));
    }
    Ok(exact_terminal_distribution(&env.dag, &model.policy_table(env))?)
}

/// `sum_x |P_T(x) - P_R(x)|` for the exact terminal distribution.
pub fn l1_exact(model: &PolicyModel, env: &Env) -> Result<f64> {
    Ok(l1_from_distribution(&model_terminal_distribution(model, env)?, env))
}

pub fn l1_from_distribution(pt: &BTreeMap<StateId, f64>, env: &Env) -> f64 {
    env.target_distribution().iter().map(|(s, pr)| (pt.get(s).copied().unwrap_or(0.0) - pr).abs()).sum()
}

/// L1 distance between the window's empirical frequencies and `P_R`.
pub fn l1_empirical(window: &[StateId], env: &Env) -> Result<f64> {
    if window.is_empty() {
        return Err(MetricsError::EmptyWindow);
    }
    let mut freq: HashMap<StateId, f64> = HashMap::new();
    let unit = 1.0 / window.len() as f64;
    for &s in window {
        *freq.entry(s).or_insert(0.0) += unit;
    }
    let mut total = 0.0;
    for (s, pr) in env.target_distribution() {
        total += (freq.remove(&s).unwrap_or(0.0) - pr).abs();
    }
    // states outside the target support
    total += freq.values().sum::<f64>();
    Ok(total)
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Pearson correlation of average ranks.
pub fn spearman_rank_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricsError::DegenerateConstantInput);
    }
    pearson(&average_ranks(a), &average_ranks(b)).ok_or(MetricsError::DegenerateConstantInput)
}

/// Rank correlation where a constant side carries no ranking information and scores 0.
fn spearman_or_zero(a: &[f64], b: &[f64]) -> Result<f64> {
    match spearman_rank_corr(a, b) {
        Err(MetricsError::DegenerateConstantInput) if a.len() >= 2 => Ok(0.0),
        other => other,
    }
}

/// Spearman correlation between exact `P_T` and `P_R` over every terminal.
pub fn spearman_exact(model: &PolicyModel, env: &Env) -> Result<f64> {
    spearman_from_distribution(&model_terminal_distribution(model, env)?, env)
}

pub fn spearman_from_distribution(pt: &BTreeMap<StateId, f64>, env: &Env) -> Result<f64> {
    let (a, b): (Vec<f64>, Vec<f64>) =
        env.target_distribution().into_iter().map(|(s, pr)| (pt.get(&s).copied().unwrap_or(0.0), pr)).unzip();
    spearman_or_zero(&a, &b)
}

/// Log of the importance estimate `(1/N) sum_i P_F(tau_i) / P_B(tau_i | x)`
/// with `tau_i` drawn from the backward policy, for each test state.
pub fn estimate_log_terminal_probs<R: Rng>(
    model: &PolicyModel,
    env: &Env,
    test_states: &[StateId],
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let dag = &env.dag;
    let terminals: Vec<StateId> = test_states.iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
    let trajs = sample_backward_batch(env, model, &terminals, rng)?;
    // one model evaluation per distinct state on any sampled path
    let mut states: Vec<StateId> =
        trajs.iter().flat_map(|t| t.states.iter().copied()).filter(|&s| s != dag.sink()).collect();
    states.sort_unstable();
    states.dedup();
    let fwd: HashMap<StateId, Vec<f64>> = states.iter().copied().zip(model.forward_rows(env, &states)).collect();
    let bwd: HashMap<StateId, Vec<f64>> = states.iter().copied().zip(model.backward_rows(env, &states)).collect();
    let log_ratio: Vec<f64> = trajs
        .iter()
        .map(|t| {
            let mut lr = 0.0;
            for (a, b) in t.edges() {
                lr += fwd[&a][dag.child_index(a, b).unwrap()];
                if b != dag.sink() {
                    lr -= bwd[&b][dag.parent_index(b, a).unwrap()];
                }
            }
            lr
        })
        .collect();
    Ok(log_ratio.chunks(n.max(1)).map(|c| logsumexp(c.iter().copied()) - (c.len() as f64).ln()).collect())
}

/// Spearman correlation between Monte-Carlo estimates of `P_T` and the target on `test_states`.
pub fn spearman_mc<R: Rng>(
    model: &PolicyModel,
    env: &Env,
    test_states: &[StateId],
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let est = estimate_log_terminal_probs(model, env, test_states, n, rng)?;
    let rewards: Vec<f64> = test_states.iter().map(|&s| env.dag.reward(s)).collect();
    spearman_or_zero(&est, &rewards)
}

/// Number of modes with at least one member in `generated`.
pub fn modes_found(generated: impl IntoIterator<Item = StateId>, modes: &[Vec<StateId>]) -> usize {
    let mut tracker = ModeTracker::new(modes);
    for s in generated {
        tracker.observe(s);
    }
    tracker.found()
}

/// Incremental mode discovery over a stream of generated terminals.
#[derive(Clone, Debug)]
pub struct ModeTracker {
    members: HashMap<StateId, Vec<usize>>,
    hit: Vec<bool>,
    found: usize,
}

impl ModeTracker {
    pub fn new(modes: &[Vec<StateId>]) -> Self {
        let mut members: HashMap<StateId, Vec<usize>> = HashMap::new();
        for (m, states) in modes.iter().enumerate() {
            for &s in states {
                members.entry(s).or_default().push(m);
            }
        }
        Self { members, hit: vec![false; modes.len()], found: 0 }
    }

    pub fn observe(&mut self, s: StateId) {
        if let Some(ms) = self.members.get(&s) {
            for &m in ms {
                if !self.hit[m] {
                    self.hit[m] = true;
                    self.found += 1;
                }
            }
        }
    }

    pub fn found(&self) -> usize {
        self.found
    }

    pub fn total(&self) -> usize {
        self.hit.len()
    }

    pub fn all_found(&self) -> bool {
        self.found == self.hit.len() && !self.hit.is_empty()
    }
}

/// Mean of the `k` largest rewards; `None` when fewer than `k` were seen.
pub fn top_k_mean(rewards: &[f64], k: usize) -> Option<f64> {
    if k == 0 || rewards.len() < k {
        return None;
    }
    let mut sorted = rewards.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Some(sorted[..k].iter().sum::<f64>() / k as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub trajectories_seen: u64,
    pub l1_exact: Option<f64>,
    pub l1_empirical: Option<f64>,
    pub spearman: Option<f64>,
    pub modes_found: Option<usize>,
    pub avg_reward: f64,
    pub avg_top_k_reward: Option<f64>,
}

pub const CSV_HEADER: &str =
    "step,trajectories,loss,objective,l1_exact,l1_empirical,spearman,modes_found,avg_reward,avg_topk_reward,seed";

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// One CSV line (no newline); missing metrics are empty fields.
    pub fn csv_row(&self, loss: &str, objective: &str, seed: u64) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.trajectories_seen,
            loss,
            objective,
            opt(self.l1_exact),
            opt(self.l1_empirical),
            opt(self.spearman),
            opt(self.modes_found),
            self.avg_reward,
            opt(self.avg_top_k_reward),
            seed
        )
    }
}

/// Writes the header followed by one row per report.
pub fn write_csv<W: Write>(mut w: W, reports: &[EvalReport], loss: &str, objective: &str, seed: u64) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", r.csv_row(loss, objective, seed))?;
    }
    Ok(())
}
