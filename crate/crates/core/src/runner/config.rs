//! Declarative experiment description, read from TOML.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunError;
use crate::dag::parse_dag;
use crate::envs::{
    build_bitseq, build_hypergrid, generate_targets, random_graded_dag, BitSeqSpec, Env, HypergridSpec, RandomDagSpec,
    RewardLaw,
};
use crate::losses::{make_builtin_loss, RegressionLoss};
use crate::model::ModelKind;
use crate::objectives::{BackwardPolicy, ObjectiveKind, ObjectiveVariant};
use crate::sampling::SamplingMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form label; not part of the config hash.
    #[serde(default)]
    pub name: String,
    pub env: EnvConfig,
    pub objective: ObjectiveConfig,
    pub loss: LossConfig,
    pub model: ModelKind,
    #[serde(default = "default_sampler")]
    pub sampler: SamplingMode,
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_sampler() -> SamplingMode {
    SamplingMode::OnPolicy
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Hypergrid(HypergridSpec),
    Bitseq(BitSeqConfig),
    RandomDag(RandomDagConfig),
    /// A DAG in the line-oriented text format.
    DagFile {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitSeqConfig {
    pub n: usize,
    pub k: usize,
    /// Explicit targets as hex strings; when absent, `modes` targets are
    /// drawn with `target_seed`.
    #[serde(default)]
    pub targets: Option<Vec<String>>,
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default)]
    pub target_seed: u64,
    pub delta: u32,
    pub beta: f64,
}

fn default_modes() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomDagConfig {
    pub layers: usize,
    pub width: usize,
    pub edge_density: f64,
    #[serde(default = "default_reward_lo")]
    pub reward_lo: f64,
    #[serde(default = "default_reward_hi")]
    pub reward_hi: f64,
    #[serde(default)]
    pub intermediate_rewards: bool,
    /// Seed of the graph itself, independent of the training seed.
    #[serde(default)]
    pub seed: u64,
}

fn default_reward_lo() -> f64 {
    0.1
}

fn default_reward_hi() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveVariant,
    #[serde(default = "default_backward")]
    pub backward: BackwardPolicy,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_backward() -> BackwardPolicy {
    BackwardPolicy::Uniform
}

fn default_lambda() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Built-in loss name, or the label of a custom expression.
    pub name: String,
    /// Custom `g(t)` over the expression grammar.
    #[serde(default)]
    pub expression: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Budget in sampled trajectories.
    pub trajectories: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_z_lr")]
    pub z_lr: f64,
    pub seed: u64,
    /// Log-ratio clamp; `inf` disables it.
    #[serde(default = "default_clamp")]
    pub clamp_bound: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_batch() -> usize {
    16
}

fn default_lr() -> f64 {
    1e-3
}

fn default_z_lr() -> f64 {
    0.1
}

fn default_clamp() -> f64 {
    30.0
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpearmanMode {
    Exact,
    Mc,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many optimizer steps (and at the end).
    #[serde(default = "default_interval")]
    pub interval: u64,
    /// Trajectories in the empirical window; defaults to 10% of the budget.
    #[serde(default)]
    pub window: Option<u64>,
    #[serde(default = "default_spearman")]
    pub spearman: SpearmanMode,
    /// Backward samples per test terminal for the Monte Carlo estimate.
    #[serde(default = "default_spearman_n")]
    pub spearman_n: usize,
    #[serde(default = "default_test_set")]
    pub test_set_size: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Compute `l1_exact` when the state space is small enough.
    #[serde(default = "default_true")]
    pub l1_exact: bool,
    /// Threshold for the trajectories-to-threshold summary column.
    #[serde(default = "default_l1_threshold")]
    pub l1_threshold: f64,
}

fn default_interval() -> u64 {
    500
}

fn default_spearman() -> SpearmanMode {
    SpearmanMode::Exact
}

fn default_spearman_n() -> usize {
    10
}

fn default_test_set() -> usize {
    512
}

fn default_top_k() -> usize {
    100
}

fn default_true() -> bool {
    true
}

fn default_l1_threshold() -> f64 {
    0.05
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: default_interval(),
            window: None,
            spearman: default_spearman(),
            spearman_n: default_spearman_n(),
            test_set_size: default_test_set(),
            top_k: default_top_k(),
            l1_exact: true,
            l1_threshold: default_l1_threshold(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let cfg: Self = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, RunError> {
        toml::to_string(self).map_err(|e| RunError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization with the label cleared.
    pub fn hash(&self) -> Result<String, RunError> {
        let mut c = self.clone();
        c.name.clear();
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.training.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let t = &self.training;
        if t.trajectories == 0 || t.batch_size == 0 {
            return Err(RunError::Config("training.trajectories and training.batch_size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.z_lr > 0.0) {
            return Err(RunError::Config("learning rates must be positive".into()));
        }
        if !(t.clamp_bound > 0.0) {
            return Err(RunError::Config(format!("clamp_bound must be positive, got {}", t.clamp_bound)));
        }
        if matches!(t.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(RunError::Config("grad_clip must be positive".into()));
        }
        if self.eval.interval == 0 {
            return Err(RunError::Config("eval.interval must be positive".into()));
        }
        if self.sampler == SamplingMode::Backward {
            return Err(RunError::Config("training samples forward; sampler.mode = backward is not supported".into()));
        }
        self.sampler.validate()?;
        self.build_loss()?;
        Ok(())
    }

    pub fn objective_kind(&self) -> ObjectiveKind {
        ObjectiveKind::new(self.objective.kind)
            .with_backward(self.objective.backward)
            .with_lambda(self.objective.lambda)
    }

    pub fn build_loss(&self) -> Result<RegressionLoss, RunError> {
        Ok(match &self.loss.expression {
            Some(src) => RegressionLoss::from_expression(&self.loss.name, src)?,
            None => make_builtin_loss(&self.loss.name)?,
        })
    }

    pub fn clamp(&self) -> Option<f64> {
        Some(self.training.clamp_bound).filter(|b| b.is_finite())
    }

    pub fn build_env(&self) -> Result<Env, RunError> {
        Ok(match &self.env {
            EnvConfig::Hypergrid(spec) => build_hypergrid(spec)?,
            EnvConfig::Bitseq(b) => {
                let targets = match &b.targets {
                    Some(hex) => hex
                        .iter()
                        .map(|h| {
                            u128::from_str_radix(h.trim_start_matches("0x"), 16)
                                .map_err(|e| RunError::Config(format!("bad target `{h}`: {e}")))
                        })
                        .collect::<Result<Vec<_>, _>>()?,
                    None => generate_targets(b.n, b.modes, &mut ChaCha8Rng::seed_from_u64(b.target_seed))?,
                };
                build_bitseq(&BitSeqSpec { n: b.n, k: b.k, targets, delta: b.delta, beta: b.beta })?
            }
            EnvConfig::RandomDag(r) => {
                let spec = RandomDagSpec {
                    layers: r.layers,
                    width: r.width,
                    edge_density: r.edge_density,
                    reward_law: RewardLaw::Uniform { lo: r.reward_lo, hi: r.reward_hi },
                    intermediate_rewards: r.intermediate_rewards,
                };
                let dag = random_graded_dag(&spec, &mut ChaCha8Rng::seed_from_u64(r.seed));
                Env::from_dag("random_dag", dag)
            }
            EnvConfig::DagFile { path } => {
                let text = std::fs::read_to_string(path)?;
                Env::from_dag("dag_file", parse_dag(&text)?)
            }
        })
    }
}
