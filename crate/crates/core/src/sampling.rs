//! Forward and backward trajectory sampling and the training batches built
//! from sampled trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{StateId, Trajectory};
use crate::envs::Env;
use crate::model::PolicyModel;
use crate::objectives::{subtb_object_weights, ObjectiveKind, ObjectiveVariant, TrainObject, WeightedBatch};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("epsilon must lie in [0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("state {0} is not terminating")]
    NotTerminating(StateId),
    #[error("backward mode samples from terminal states; use sample_backward_batch")]
    BackwardModeHasNoForwardSampler,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplingMode {
    OnPolicy,
    EpsilonNoisy { epsilon: f64 },
    Tempered { temperature: f64 },
    Backward,
}

impl SamplingMode {
    pub fn validate(&self) -> Result<(), SamplingError> {
        match *self {
            SamplingMode::EpsilonNoisy { epsilon } if !(0.0..=1.0).contains(&epsilon) => {
                Err(SamplingError::InvalidEpsilon(epsilon))
            }
            SamplingMode::Tempered { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(SamplingError::InvalidTemperature(temperature))
            }
            _ => Ok(()),
        }
    }

    /// Action probabilities from the model's log probabilities over valid children.
    pub fn action_probs(&self, log_probs: &[f64]) -> Vec<f64> {
        match *self {
            SamplingMode::EpsilonNoisy { epsilon } => {
                let u = epsilon / log_probs.len() as f64;
                log_probs.iter().map(|lp| (1.0 - epsilon) * lp.exp() + u).collect()
            }
            SamplingMode::Tempered { temperature } => {
                let scaled: Vec<f64> = log_probs.iter().map(|lp| lp / temperature).collect();
                let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|x| x / total).collect()
            }
            SamplingMode::OnPolicy | SamplingMode::Backward => log_probs.iter().map(|lp| lp.exp()).collect(),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    #[serde(flatten)]
    pub mode: SamplingMode,
    pub seed: u64,
}

/// Independent random streams of one run.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Sampling = 1,
    Init = 2,
    Eval = 3,
}

/// Generator for `stream` of the run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Inverse-CDF draw; one uniform per call so every mode consumes the
/// stream identically.
fn draw<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    // rounding left u past the end; take the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// `n` complete trajectories, advanced in lockstep so each step costs a
/// single model evaluation.
pub fn sample_forward_batch<R: Rng>(
    env: &Env,
    model: &PolicyModel,
    mode: SamplingMode,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>, SamplingError> {
    mode.validate()?;
    if mode == SamplingMode::Backward {
        return Err(SamplingError::BackwardModeHasNoForwardSampler);
    }
    let dag = &env.dag;
    let mut paths: Vec<Vec<StateId>> = vec![vec![dag.source()]; n];
    let mut active: Vec<usize> = (0..n).collect();
    while !active.is_empty() {
        let states: Vec<StateId> = active.iter().map(|&i| *paths[i].last().unwrap()).collect();
        let rows = model.forward_rows(env, &states);
        for ((&i, &s), row) in active.iter().zip(&states).zip(&rows) {
            let probs = mode.action_probs(row);
            paths[i].push(dag.children(s)[draw(&probs, rng)]);
        }
        active.retain(|&i| *paths[i].last().unwrap() != dag.sink());
    }
    Ok(paths.into_iter().map(Trajectory::new).collect())
}

pub fn sample_forward_trajectory<R: Rng>(
    env: &Env,
    model: &PolicyModel,
    mode: SamplingMode,
    rng: &mut R,
) -> Result<Trajectory, SamplingError> {
    Ok(sample_forward_batch(env, model, mode, 1, rng)?.pop().unwrap())
}

/// Ancestor sampling from `terminal` under `log_pb(s)` (log probabilities
/// aligned with the parents of `s`), reversed and closed with the sink edge.
pub fn sample_backward_trajectory<R: Rng>(
    env: &Env,
    mut log_pb: impl FnMut(StateId) -> Vec<f64>,
    terminal: StateId,
    rng: &mut R,
) -> Result<Trajectory, SamplingError> {
    let dag = &env.dag;
    if !dag.is_terminating(terminal) {
        return Err(SamplingError::NotTerminating(terminal));
    }
    let mut path = vec![dag.sink(), terminal];
    let mut s = terminal;
    while s != dag.source() {
        let probs: Vec<f64> = log_pb(s).iter().map(|lp| lp.exp()).collect();
        s = dag.parents(s)[draw(&probs, rng)];
        path.push(s);
    }
    path.reverse();
    Ok(Trajectory::new(path))
}

/// Backward samples from each of `terminals` under the model's backward
/// policy (uniform when the model has no backward head).
pub fn sample_backward_batch<R: Rng>(
    env: &Env,
    model: &PolicyModel,
    terminals: &[StateId],
    rng: &mut R,
) -> Result<Vec<Trajectory>, SamplingError> {
    let dag = &env.dag;
    if let Some(&t) = terminals.iter().find(|&&t| !dag.is_terminating(t)) {
        return Err(SamplingError::NotTerminating(t));
    }
    let mut paths: Vec<Vec<StateId>> = terminals.iter().map(|&t| vec![dag.sink(), t]).collect();
    let mut active: Vec<usize> = (0..paths.len()).filter(|&i| paths[i][1] != dag.source()).collect();
    while !active.is_empty() {
        let states: Vec<StateId> = active.iter().map(|&i| *paths[i].last().unwrap()).collect();
        let rows = model.backward_rows(env, &states);
        for ((&i, &s), row) in active.iter().zip(&states).zip(&rows) {
            let probs: Vec<f64> = row.iter().map(|lp| lp.exp()).collect();
            paths[i].push(dag.parents(s)[draw(&probs, rng)]);
        }
        active.retain(|&i| *paths[i].last().unwrap() != dag.source());
    }
    Ok(paths
        .into_iter()
        .map(|mut p| {
            p.reverse();
            Trajectory::new(p)
        })
        .collect())
}

/// Training objects of `kind` drawn from complete trajectories, each
/// trajectory carrying total weight `1 / trajs.len()`.
pub fn build_batch(kind: &ObjectiveKind, trajs: &[Trajectory]) -> WeightedBatch {
    let w = 1.0 / trajs.len().max(1) as f64;
    let mut items = Vec::new();
    for t in trajs {
        let n = t.states.len();
        match kind.variant {
            ObjectiveVariant::Fm => {
                items.extend(t.states[1..n - 1].iter().map(|&s| (TrainObject::State(s), w)));
            }
            ObjectiveVariant::Db | ObjectiveVariant::FlDb | ObjectiveVariant::ModDb => {
                items.extend(t.edges().map(|(a, b)| (TrainObject::Transition(a, b), w)));
            }
            ObjectiveVariant::Tb => items.push((TrainObject::Complete(t.clone()), w)),
            ObjectiveVariant::Stb | ObjectiveVariant::FlStb | ObjectiveVariant::ModStb => {
                items.extend(
                    subtb_object_weights(t, kind.stb_lambda)
                        .into_iter()
                        .map(|(sub, sw)| (TrainObject::Partial(sub), sw * w)),
                );
            }
        }
    }
    WeightedBatch::new(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::fixtures::{chain, diamond, fork};
    use crate::dag::{exact_terminal_distribution, FlowDagBuilder};
    use crate::envs::{random_graded_dag, RandomDagSpec};
    use crate::model::{HeadLayout, HeadMode, ModelKind};
    use crate::objectives::BackwardPolicy;

    fn model_for(env: &Env, backward: bool) -> PolicyModel {
        let heads = HeadLayout {
            mode: HeadMode::Policy,
            forward_width: env.layout.forward_width,
            backward_width: if backward { env.layout.backward_width } else { 0 },
            state_flow: false,
            total_flow: false,
        };
        PolicyModel::new(ModelKind::Tabular, heads, env, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn set_logits(model: &mut PolicyModel, s: StateId, logits: &[f64]) {
        let width = model.heads().out_width();
        let id = model.table_param().unwrap();
        model.store_mut().get_mut(id).data[s.index() * width..s.index() * width + logits.len()].copy_from_slice(logits);
    }

    fn three_way() -> Env {
        let mut b = FlowDagBuilder::new(5, StateId(0), StateId(4));
        for c in 1..4 {
            b.edge(0, c).edge(c, 4).reward(c, 1.0);
        }
        Env::from_dag("three", b.build().unwrap())
    }

    fn within_sigma(count: usize, n: usize, p: f64, k: f64) -> bool {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (count as f64 - n as f64 * p).abs() <= k * sd
    }

    #[test]
    fn single_path_for_every_mode() {
        let env = Env::from_dag("chain", chain(1.0));
        let model = model_for(&env, false);
        let mut rng = stream_rng(1, Stream::Sampling);
        for mode in [
            SamplingMode::OnPolicy,
            SamplingMode::EpsilonNoisy { epsilon: 0.3 },
            SamplingMode::Tempered { temperature: 4.0 },
        ] {
            let t = sample_forward_trajectory(&env, &model, mode, &mut rng).unwrap();
            assert_eq!(t.states, vec![StateId(0), StateId(1), StateId(2)]);
        }
    }

    #[test]
    fn full_noise_is_uniform() {
        let env = three_way();
        let mut model = model_for(&env, false);
        set_logits(&mut model, StateId(0), &[4.0, 0.0, -4.0]);
        let mut rng = stream_rng(7, Stream::Sampling);
        let n = 100_000;
        let trajs =
            sample_forward_batch(&env, &model, SamplingMode::EpsilonNoisy { epsilon: 1.0 }, n, &mut rng).unwrap();
        for c in 1..4 {
            let count = trajs.iter().filter(|t| t.states[1] == StateId(c)).count();
            assert!(within_sigma(count, n, 1.0 / 3.0, 4.0), "child {c}: {count}");
        }
    }

    #[test]
    fn zero_noise_is_on_policy() {
        let env = three_way();
        let mut model = model_for(&env, false);
        set_logits(&mut model, StateId(0), &[0.3, -1.0, 2.0]);
        let a = sample_forward_batch(&env, &model, SamplingMode::OnPolicy, 500, &mut stream_rng(3, Stream::Sampling))
            .unwrap();
        let b = sample_forward_batch(
            &env,
            &model,
            SamplingMode::EpsilonNoisy { epsilon: 0.0 },
            500,
            &mut stream_rng(3, Stream::Sampling),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tempering_flattens() {
        // p = (0.8, 0.2) at T = 2 gives (2/3, 1/3)
        let env = Env::from_dag("fork", fork(1.0, 1.0));
        let mut model = model_for(&env, false);
        set_logits(&mut model, StateId(0), &[0.8f64.ln(), 0.2f64.ln()]);
        let mode = SamplingMode::Tempered { temperature: 2.0 };
        let probs = mode.action_probs(&model.forward_rows(&env, &[StateId(0)])[0]);
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-12);
        let n = 100_000;
        let trajs = sample_forward_batch(&env, &model, mode, n, &mut stream_rng(5, Stream::Sampling)).unwrap();
        let count = trajs.iter().filter(|t| t.states[1] == StateId(1)).count();
        assert!(within_sigma(count, n, 2.0 / 3.0, 4.0), "{count}");
    }

    #[test]
    fn noise_keeps_every_action_alive() {
        let mode = SamplingMode::EpsilonNoisy { epsilon: 1e-3 };
        let probs = mode.action_probs(&[0.0, -800.0, f64::NEG_INFINITY]);
        assert!(probs.iter().all(|&p| p > 0.0));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_modes() {
        let env = three_way();
        let model = model_for(&env, false);
        let mut rng = stream_rng(0, Stream::Sampling);
        let err =
            sample_forward_batch(&env, &model, SamplingMode::EpsilonNoisy { epsilon: 1.5 }, 1, &mut rng).unwrap_err();
        assert_eq!(err, SamplingError::InvalidEpsilon(1.5));
        let err =
            sample_forward_batch(&env, &model, SamplingMode::Tempered { temperature: 0.0 }, 1, &mut rng).unwrap_err();
        assert_eq!(err, SamplingError::InvalidTemperature(0.0));
        let err = sample_forward_batch(&env, &model, SamplingMode::Backward, 1, &mut rng).unwrap_err();
        assert_eq!(err, SamplingError::BackwardModeHasNoForwardSampler);
    }

    #[test]
    fn backward_parents_on_the_diamond() {
        let env = Env::from_dag("diamond", diamond());
        let model = model_for(&env, false);
        let n = 100_000;
        let terminals = vec![StateId(3); n];
        let trajs = sample_backward_batch(&env, &model, &terminals, &mut stream_rng(9, Stream::Eval)).unwrap();
        assert!(trajs.iter().all(|t| t.is_complete(&env.dag) && t.is_valid(&env.dag)));
        let count = trajs.iter().filter(|t| t.states[1] == StateId(1)).count();
        assert!(within_sigma(count, n, 0.5, 4.0), "{count}");

        let single = sample_backward_trajectory(
            &env,
            |s| vec![-(env.dag.parents(s).len() as f64).ln(); env.dag.parents(s).len()],
            StateId(3),
            &mut stream_rng(1, Stream::Eval),
        )
        .unwrap();
        assert!(single.is_complete(&env.dag) && single.is_valid(&env.dag));
        let err = sample_backward_batch(&env, &model, &[StateId(1)], &mut stream_rng(1, Stream::Eval)).unwrap_err();
        assert_eq!(err, SamplingError::NotTerminating(StateId(1)));
    }

    #[test]
    fn learned_backward_policy_is_followed() {
        let env = Env::from_dag("diamond", diamond());
        let mut model = model_for(&env, true);
        let off = model.heads().backward_offset();
        let width = model.heads().out_width();
        let id = model.table_param().unwrap();
        let slots = env.layout.backward_slots(StateId(3)).to_vec();
        let data = &mut model.store_mut().get_mut(id).data;
        data[3 * width + off + slots[0] as usize] = 0.9f64.ln();
        data[3 * width + off + slots[1] as usize] = 0.1f64.ln();
        let n = 50_000;
        let trajs =
            sample_backward_batch(&env, &model, &vec![StateId(3); n], &mut stream_rng(2, Stream::Eval)).unwrap();
        let count = trajs.iter().filter(|t| t.states[1] == StateId(1)).count();
        assert!(within_sigma(count, n, 0.9, 4.0), "{count}");
    }

    #[test]
    fn terminal_frequencies_match_exact_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..3 {
            let dag = random_graded_dag(&RandomDagSpec::new(3, 3, 0.6), &mut rng);
            let env = Env::from_dag("random", dag);
            let mut model = model_for(&env, false);
            let id = model.table_param().unwrap();
            for x in model.store_mut().get_mut(id).data.iter_mut() {
                *x = rng.gen_range(-1.5..1.5);
            }
            let exact = exact_terminal_distribution(&env.dag, &model.policy_table(&env)).unwrap();
            let n = 100_000;
            let trajs = sample_forward_batch(&env, &model, SamplingMode::OnPolicy, n, &mut rng).unwrap();
            let mut counts = std::collections::BTreeMap::new();
            for t in &trajs {
                *counts.entry(t.states[t.states.len() - 2]).or_insert(0usize) += 1;
            }
            let tv: f64 =
                exact.iter().map(|(s, p)| (p - *counts.get(s).unwrap_or(&0) as f64 / n as f64).abs()).sum::<f64>()
                    / 2.0;
            assert!(tv < 0.02, "{tv}");
        }
    }

    #[test]
    fn batches_per_objective() {
        let t = Trajectory::new(vec![StateId(0), StateId(1), StateId(3), StateId(4)]);
        let trajs = vec![t.clone(), t];
        let count = |v: ObjectiveVariant| {
            let b = build_batch(&ObjectiveKind::new(v).with_backward(BackwardPolicy::Uniform), &trajs);
            let total: f64 = b.items.iter().map(|x| x.1).sum();
            (b.len(), total)
        };
        assert_eq!(count(ObjectiveVariant::Fm), (4, 2.0));
        assert_eq!(count(ObjectiveVariant::Db), (6, 3.0));
        assert_eq!(count(ObjectiveVariant::Tb), (2, 1.0));
        let (n, total) = count(ObjectiveVariant::Stb);
        assert_eq!(n, 12);
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn streams_are_independent() {
        let a: u64 = stream_rng(4, Stream::Sampling).gen();
        let b: u64 = stream_rng(4, Stream::Init).gen();
        let c: u64 = stream_rng(4, Stream::Sampling).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
