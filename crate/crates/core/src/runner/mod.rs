//! Seeded training runs: sample, build the weighted batch, take an Adam
//! step, evaluate on schedule, and collect CSV rows plus a summary.

pub mod config;

#[cfg(test)]
mod tests;

pub use config::{
    BitSeqConfig, EnvConfig, EvalConfig, ExperimentConfig, LossConfig, ObjectiveConfig, RandomDagConfig, SpearmanMode,
    TrainingConfig,
};

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{DagError, StateId};
use crate::envs::{Env, EnvError, EnvKind};
use crate::losses::LossError;
use crate::metrics::{
    l1_empirical, l1_from_distribution, model_terminal_distribution, spearman_from_distribution, spearman_mc,
    top_k_mean, write_csv, EvalReport, MetricsError, ModeTracker, EXACT_STATE_LIMIT,
};
use crate::model::{write_checkpoint, Adam, AdamConfig, ModelError, PolicyModel, Tape, TapeError};
use crate::objectives::{unified_loss, ObjectiveError};
use crate::sampling::{build_batch, sample_forward_batch, stream_rng, SamplingError, Stream};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error(
        "loss became non-finite at step {step}: log-ratios mean {mean}, min {min}, max {max}, {non_finite} non-finite"
    )]
    NumericalDivergence { step: u64, mean: f64, min: f64, max: f64, non_finite: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub loss: String,
    pub objective: String,
    pub seed: u64,
    pub config_hash: String,
    pub final_report: EvalReport,
    pub steps: u64,
    pub trajectories: u64,
    pub wall_time_secs: f64,
    /// Bit-sequence runs only.
    pub steps_to_all_modes: Option<u64>,
    pub trajectories_to_all_modes: Option<u64>,
    /// First evaluation with `l1_exact` below the configured threshold.
    pub trajectories_to_l1_threshold: Option<u64>,
    /// Final rank correlation below zero.
    pub excluded_as_collapse: bool,
    pub clamped_log_ratios: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub reports: Vec<EvalReport>,
    pub csv: String,
    pub checkpoint: Vec<u8>,
}

impl RunOutput {
    /// Writes `<stem>.csv`, `<stem>.summary.json` and `<stem>.ckpt` into `dir`.
    pub fn write_to(&self, dir: &Path, stem: &str) -> Result<(), RunError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), &self.csv)?;
        std::fs::write(dir.join(format!("{stem}.summary.json")), serde_json::to_string_pretty(&self.summary)? + "\n")?;
        std::fs::write(dir.join(format!("{stem}.ckpt")), &self.checkpoint)?;
        Ok(())
    }
}

/// Default file stem of a run: `<name or env>_<objective>_<loss>_s<seed>`.
pub fn run_stem(config: &ExperimentConfig) -> String {
    let prefix = if config.name.is_empty() {
        match &config.env {
            EnvConfig::Hypergrid(_) => "hypergrid",
            EnvConfig::Bitseq(_) => "bitseq",
            EnvConfig::RandomDag(_) => "random_dag",
            EnvConfig::DagFile { .. } => "dag_file",
        }
    } else {
        config.name.as_str()
    };
    format!("{prefix}_{}_{}_s{}", config.objective.kind.name(), config.loss.name, config.training.seed)
}

struct Evaluator<'a> {
    env: &'a Env,
    config: &'a ExperimentConfig,
    exact: bool,
    test_set: Vec<StateId>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a> Evaluator<'a> {
    fn new(env: &'a Env, config: &'a ExperimentConfig) -> Self {
        let mut rng = stream_rng(config.training.seed, Stream::Eval);
        let terminals = env.dag.terminating_states();
        let test_set = if terminals.len() <= config.eval.test_set_size {
            terminals
        } else {
            let mut idx = sample(&mut rng, terminals.len(), config.eval.test_set_size).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| terminals[i]).collect()
        };
        Self { env, config, exact: env.dag.n_states() <= EXACT_STATE_LIMIT, test_set, rng }
    }

    fn report(
        &mut self,
        model: &PolicyModel,
        step: u64,
        seen: u64,
        window: &VecDeque<StateId>,
        best: &BTreeMap<StateId, f64>,
        modes: &ModeTracker,
    ) -> Result<EvalReport, RunError> {
        let eval = &self.config.eval;
        let need_exact = self.exact && (eval.l1_exact || eval.spearman == SpearmanMode::Exact);
        let pt = if need_exact { Some(model_terminal_distribution(model, self.env)?) } else { None };
        let l1_exact = match &pt {
            Some(pt) if eval.l1_exact => Some(l1_from_distribution(pt, self.env)),
            _ => None,
        };
        let spearman = match (eval.spearman, &pt) {
            (SpearmanMode::Exact, Some(pt)) => spearman_from_distribution(pt, self.env),
            (SpearmanMode::Mc, _) => spearman_mc(model, self.env, &self.test_set, eval.spearman_n, &mut self.rng),
            _ => Err(MetricsError::DegenerateConstantInput),
        };
        // a single terminal has no ranking
        let spearman = match spearman {
            Ok(x) => Some(x),
            Err(MetricsError::DegenerateConstantInput) => None,
            Err(e) => return Err(e.into()),
        };
        let window: Vec<StateId> = window.iter().copied().collect();
        let (l1_emp, avg_reward) = if window.is_empty() {
            (None, 0.0)
        } else {
            let mean = window.iter().map(|&s| self.env.dag.reward(s)).sum::<f64>() / window.len() as f64;
            (Some(l1_empirical(&window, self.env)?), mean)
        };
        let unique: Vec<f64> = best.values().copied().collect();
        Ok(EvalReport {
            step,
            trajectories_seen: seen,
            l1_exact,
            l1_empirical: l1_emp,
            spearman,
            modes_found: (modes.total() > 0).then(|| modes.found()),
            avg_reward,
            avg_top_k_reward: top_k_mean(&unique, eval.top_k),
        })
    }
}

/// One training run. Everything except `wall_time_secs` is a pure
/// function of the config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput, RunError> {
    let start = Instant::now();
    config.validate()?;
    let env = config.build_env()?;
    let kind = config.objective_kind();
    kind.check_env(&env)?;
    let g = config.build_loss()?;
    let clamp = config.clamp();
    let hash = config.hash()?;
    let t = &config.training;

    let mut model =
        PolicyModel::new(config.model.clone(), kind.required_heads(&env), &env, &mut stream_rng(t.seed, Stream::Init));
    let mut adam_cfg = AdamConfig::new(vec![t.lr, t.z_lr]);
    adam_cfg.grad_clip = t.grad_clip;
    let mut adam = Adam::new(model.store(), adam_cfg);
    let mut rng = stream_rng(t.seed, Stream::Sampling);

    let batch = t.batch_size as u64;
    let n_steps = t.trajectories.div_ceil(batch);
    let window_cap = config.eval.window.unwrap_or((t.trajectories / 10).max(1)) as usize;
    let mut window: VecDeque<StateId> = VecDeque::with_capacity(window_cap);
    let mut seen_rewards: BTreeMap<StateId, f64> = BTreeMap::new();
    let mut modes = ModeTracker::new(&env.modes);
    let track_all_modes = matches!(env.kind, EnvKind::BitSeq(_));
    let mut evaluator = Evaluator::new(&env, config);

    let mut reports = vec![evaluator.report(&model, 0, 0, &window, &seen_rewards, &modes)?];
    let mut steps_to_all_modes = None;
    let mut trajectories_to_all_modes = None;
    let mut clamped = 0u64;
    let mut seen = 0u64;
    for step in 1..=n_steps {
        let n = batch.min(t.trajectories - seen) as usize;
        let trajs = sample_forward_batch(&env, &model, config.sampler, n, &mut rng)?;
        for tr in &trajs {
            let x = tr.states[tr.states.len() - 2];
            seen += 1;
            if window.len() == window_cap {
                window.pop_front();
            }
            window.push_back(x);
            seen_rewards.entry(x).or_insert_with(|| env.dag.reward(x));
            modes.observe(x);
            if track_all_modes && trajectories_to_all_modes.is_none() && modes.all_found() {
                trajectories_to_all_modes = Some(seen);
                steps_to_all_modes = Some(step);
            }
        }
        let wb = build_batch(&kind, &trajs);
        let mut tape = Tape::new();
        let eval = unified_loss(&mut tape, &wb, &kind, &model, &env, &g, clamp)?;
        clamped += eval.clamped as u64;
        let grads = tape.backward(eval.loss)?;
        let finite_grads = model.store().flat_grad(&grads).iter().all(|x| x.is_finite());
        if !eval.value.is_finite() || !finite_grads {
            return Err(divergence(step, &eval.log_ratios));
        }
        adam.step(model.store_mut(), &grads)?;
        if step % config.eval.interval == 0 || step == n_steps {
            reports.push(evaluator.report(&model, step, seen, &window, &seen_rewards, &modes)?);
        }
    }

    let final_report = reports.last().cloned().unwrap_or_default();
    let threshold = config.eval.l1_threshold;
    let summary = RunSummary {
        name: config.name.clone(),
        loss: g.name().to_string(),
        objective: kind.variant.name().to_string(),
        seed: t.seed,
        config_hash: hash.clone(),
        steps: n_steps,
        trajectories: seen,
        wall_time_secs: start.elapsed().as_secs_f64(),
        steps_to_all_modes,
        trajectories_to_all_modes,
        trajectories_to_l1_threshold: reports
            .iter()
            .find(|r| r.l1_exact.is_some_and(|l| l < threshold))
            .map(|r| r.trajectories_seen),
        excluded_as_collapse: final_report.spearman.is_some_and(|s| s < 0.0),
        clamped_log_ratios: clamped,
        final_report,
    };
    let mut csv = Vec::new();
    write_csv(&mut csv, &reports, &summary.loss, &summary.objective, t.seed)?;
    let mut checkpoint = Vec::new();
    write_checkpoint(&mut checkpoint, model.store(), &hash)?;
    Ok(RunOutput { summary, reports, csv: String::from_utf8(csv).expect("CSV rows are ASCII"), checkpoint })
}

fn divergence(step: u64, log_ratios: &[f64]) -> RunError {
    let finite: Vec<f64> = log_ratios.iter().copied().filter(|x| x.is_finite()).collect();
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    RunError::NumericalDivergence {
        step,
        mean,
        min: finite.iter().copied().fold(f64::INFINITY, f64::min),
        max: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        non_finite: log_ratios.len() - finite.len(),
    }
}

/// Runs every config on up to `parallelism` threads. Results keep the
/// input order; one failing run does not affect the others.
pub fn run_suite(configs: &[ExperimentConfig], parallelism: usize) -> Vec<Result<RunOutput, RunError>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunOutput, RunError>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..parallelism.max(1).min(configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let out = run_experiment(cfg);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every config is claimed by a worker")).collect()
}

/// Per (objective, loss) medians over the successful runs of a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub objective: String,
    pub loss: String,
    pub runs: usize,
    pub failures: usize,
    pub excluded_as_collapse: usize,
    pub reached_l1_threshold: usize,
    pub found_all_modes: usize,
    pub median_final_l1: Option<f64>,
    pub median_final_spearman: Option<f64>,
    pub median_trajectories_to_l1_threshold: Option<f64>,
    pub median_steps_to_all_modes: Option<f64>,
    pub median_trajectories_to_all_modes: Option<f64>,
}

pub fn median(xs: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Groups results by the objective and loss named in each config.
pub fn aggregate(configs: &[ExperimentConfig], results: &[Result<RunOutput, RunError>]) -> Vec<GroupStats> {
    let mut groups: BTreeMap<(String, String), Vec<Option<&RunSummary>>> = BTreeMap::new();
    for (cfg, r) in configs.iter().zip(results) {
        let key = (cfg.objective.kind.name().to_string(), cfg.loss.name.clone());
        groups.entry(key).or_default().push(r.as_ref().ok().map(|o| &o.summary));
    }
    groups
        .into_iter()
        .map(|((objective, loss), runs)| {
            let ok: Vec<&RunSummary> = runs.iter().flatten().copied().collect();
            let col =
                |f: &dyn Fn(&RunSummary) -> Option<f64>| median(&ok.iter().filter_map(|s| f(s)).collect::<Vec<_>>());
            GroupStats {
                objective,
                loss,
                runs: runs.len(),
                failures: runs.len() - ok.len(),
                excluded_as_collapse: ok.iter().filter(|s| s.excluded_as_collapse).count(),
                reached_l1_threshold: ok.iter().filter(|s| s.trajectories_to_l1_threshold.is_some()).count(),
                found_all_modes: ok.iter().filter(|s| s.trajectories_to_all_modes.is_some()).count(),
                median_final_l1: col(&|s| s.final_report.l1_exact),
                median_final_spearman: col(&|s| s.final_report.spearman),
                median_trajectories_to_l1_threshold: col(&|s| s.trajectories_to_l1_threshold.map(|x| x as f64)),
                median_steps_to_all_modes: col(&|s| s.steps_to_all_modes.map(|x| x as f64)),
                median_trajectories_to_all_modes: col(&|s| s.trajectories_to_all_modes.map(|x| x as f64)),
            }
        })
        .collect()
}
