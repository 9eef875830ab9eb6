//! The dead-branch tree: the root picks branch A or B; A splits evenly
//! (frozen) into a rewarded terminal and a zero-reward one, B leads to a
//! rewarded terminal. Only the root choice trains, with log Z fixed at ln 2.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{OracleError, Result};
use crate::dag::{FlowDagBuilder, StateId, Trajectory};
use crate::envs::Env;
use crate::losses::{classify_loss, divergence_term, FDivergenceSpec, LossClassification, RegressionLoss};
use crate::model::{ModelKind, PolicyModel, Tape};
use crate::objectives::{flow_pairs, loss_from_pairs, ObjectiveKind, ObjectiveVariant, TrainObject};

const ROOT: StateId = StateId(0);
const BRANCH_A: StateId = StateId(1);

/// Builds the tree with reward `dead_reward` on the second terminal under A.
pub fn dead_branch_env(dead_reward: f64) -> Env {
    let mut b = FlowDagBuilder::new(7, StateId(0), StateId(6));
    b.edge(0, 1).edge(0, 2).edge(1, 3).edge(1, 4).edge(2, 5);
    for (s, r) in [(3, 1.0), (4, dead_reward), (5, 1.0)] {
        b.edge(s, 6).reward(s, r);
    }
    Env::from_dag("dead_branch", b.build().expect("fixed tree is valid"))
}

/// `D_f(p_B || p_F)` over the three trajectories when the root sends
/// probability `p_a` to branch A: forward flows `p_a`, `p_a`, `2(1 - p_a)`.
pub fn dead_branch_divergence(f: &FDivergenceSpec, p_a: f64, dead_reward: f64) -> f64 {
    let forward = [p_a, p_a, 2.0 * (1.0 - p_a)];
    let backward = [1.0, dead_reward, 1.0];
    forward.iter().zip(backward).map(|(&q, p)| divergence_term(p, q, f).unwrap_or(f64::NAN)).sum()
}

/// Minimizer of [`dead_branch_divergence`] over the grid `0, step, 2 step, ..., 1`.
pub fn grid_search_dead_branch(f: &FDivergenceSpec, step: f64, dead_reward: f64) -> f64 {
    let n = (1.0 / step).round() as usize;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=n {
        let a = i as f64 * step;
        let d = dead_branch_divergence(f, a, dead_reward);
        if d < best.0 {
            best = (d, a);
        }
    }
    best.1
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroVerdict {
    /// Branch A ends below 1e-3.
    BranchKilled,
    MassKept,
}

#[derive(Clone, Debug, Serialize)]
pub struct ZeroBehaviorReport {
    pub loss: String,
    pub p_dead_branch: f64,
    pub iterations: usize,
    pub final_gradient: f64,
    pub classification: LossClassification,
    pub verdict: ZeroVerdict,
    /// The verdict agrees with the classification: zero-forcing kills the
    /// branch, zero-avoiding without zero-forcing keeps it.
    pub consistent: bool,
}

struct Problem {
    env: Env,
    kind: ObjectiveKind,
    model: PolicyModel,
    slot_a: usize,
    objects: Vec<TrainObject>,
}

impl Problem {
    fn new() -> Self {
        let env = dead_branch_env(0.0);
        let kind = ObjectiveKind::new(ObjectiveVariant::Tb);
        let mut model =
            PolicyModel::new(ModelKind::Tabular, kind.required_heads(&env), &env, &mut ChaCha8Rng::seed_from_u64(0));
        let z = model.log_z_param().unwrap();
        model.store_mut().get_mut(z).data[0] = std::f64::consts::LN_2;
        let slot_a = env.layout.forward_slot(&env.dag, ROOT, BRANCH_A).unwrap();
        let objects = [[0, 1, 3, 6], [0, 1, 4, 6], [0, 2, 5, 6]]
            .iter()
            .map(|p| TrainObject::Complete(Trajectory::new(p.iter().map(|&s| StateId(s)).collect())))
            .collect();
        Self { env, kind, model, slot_a, objects }
    }

    fn set(&mut self, theta: f64) {
        let id = self.model.table_param().unwrap();
        self.model.store_mut().get_mut(id).data[self.slot_a] = theta;
    }

    fn p_a(&self) -> f64 {
        self.model.forward_policy(&self.env, ROOT).unwrap()[0].1
    }

    /// Gradient in the root logit of the loss weighted by the detached
    /// forward flow. The tape yields the gradient per log forward flow;
    /// the chain through the root softmax (`1 - P(A)` for trajectories via
    /// A, `-P(A)` via B) is applied in extended reals so an infinite slope
    /// stays infinite instead of turning into `inf - inf`.
    fn gradient(&mut self, g: &RegressionLoss) -> Result<f64> {
        let refs: Vec<&TrainObject> = self.objects.iter().collect();
        let mut tape = Tape::new();
        let (pf, pb) = flow_pairs(&mut tape, &self.kind, &self.model, &self.env, &refs)?;
        let (pf, pb) = (tape.value(pf).to_vec(), tape.value(pb).to_vec());
        let mut tape = Tape::new();
        let pf_var = tape.param(0, pf.len(), 1, &pf);
        let pb_var = tape.constant(pb.len(), 1, pb);
        let mu: Vec<f64> = pf.iter().map(|x| x.exp()).collect();
        let loss = loss_from_pairs(&mut tape, pf_var, pb_var, mu, g, None);
        let per_flow = tape.backward(loss.loss)?.get(0).map(|x| x.to_vec()).unwrap_or_default();
        let a = self.p_a();
        let jacobian = [1.0 - a, 1.0 - a, -a];
        Ok(per_flow.iter().zip(jacobian).filter(|(d, _)| **d != 0.0).map(|(d, j)| d * j).sum())
    }
}

/// Descends the root logit from 1.0 along the loss gradient, with
/// backtracking on the merit `D_f(p_B || p_F)` of the induced `f`. An
/// infinite gradient is followed by sign with growing steps; at `P(A) = 0`
/// the weights vanish and so does the gradient. Stops at |gradient| < 1e-9.
pub fn zero_behavior_test(g: &RegressionLoss, max_iterations: usize) -> Result<ZeroBehaviorReport> {
    let f = FDivergenceSpec::induced_by(g)?;
    let classification = classify_loss(g)?;
    let mut problem = Problem::new();
    let mut theta = 1.0;
    let mut step = 1.0;
    problem.set(theta);
    let mut grad = problem.gradient(g)?;
    let mut iterations = 0;
    while !(grad.abs() < 1e-9) {
        if iterations >= max_iterations || grad.is_nan() {
            return Err(OracleError::NonConvergence { iterations, p_dead_branch: problem.p_a() });
        }
        iterations += 1;
        let merit = dead_branch_divergence(&f, problem.p_a(), 0.0);
        let dir = if grad.is_finite() { -grad } else { -grad.signum() };
        let mut accepted = false;
        for _ in 0..80 {
            problem.set(theta + step * dir);
            let trial = dead_branch_divergence(&f, problem.p_a(), 0.0);
            let sufficient = trial <= merit - 1e-4 * step * dir * dir;
            // below merit resolution, settle for a smaller gradient
            let flat = (trial - merit).abs() <= 1e-13 * merit.abs().max(1.0);
            let infinite = merit.is_infinite() && trial <= merit;
            if sufficient || infinite || (flat && problem.gradient(g)?.abs() < grad.abs()) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            problem.set(theta);
            return Err(OracleError::NonConvergence { iterations, p_dead_branch: problem.p_a() });
        }
        theta += step * dir;
        step *= 2.0;
        grad = problem.gradient(g)?;
    }
    problem.set(theta);
    let p = problem.p_a();
    let verdict = if p < 1e-3 { ZeroVerdict::BranchKilled } else { ZeroVerdict::MassKept };
    let consistent = if classification.zero_forcing {
        verdict == ZeroVerdict::BranchKilled
    } else if classification.zero_avoiding {
        verdict == ZeroVerdict::MassKept
    } else {
        true
    };
    Ok(ZeroBehaviorReport {
        loss: g.name().to_string(),
        p_dead_branch: p,
        iterations,
        final_gradient: grad,
        classification,
        verdict,
        consistent,
    })
}
