//! Exact numerical checks of the loss/divergence correspondence on small
//! graded DAGs, plus the dead-branch experiment for zero-forcing behavior.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dag::{
    complete_trajectory_cut, count_complete_trajectories, edge_layer_cut, is_graded, layer_index,
    partial_trajectory_cut, state_layer_cut, write_dag, Cut, CutKind, DagError, FlowDag, StateId,
};
use crate::envs::{random_graded_dag, Env, RandomDagSpec};
use crate::losses::{f_divergence_slices, f_from_g_with, FDivergenceSpec, LossError, Quadrature, RegressionLoss};
use crate::model::{ModelError, ModelKind, PolicyModel, Tape, TapeError};
use crate::objectives::{
    flow_pairs, loss_from_pairs, BackwardPolicy, ObjectiveError, ObjectiveKind, ObjectiveVariant, TrainObject,
};

mod zero;

pub use zero::{
    dead_branch_divergence, dead_branch_env, grid_search_dead_branch, zero_behavior_test, ZeroBehaviorReport,
    ZeroVerdict,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("the oracle needs a graded DAG")]
    NotGraded,
    #[error("{0} objects exceed the enumeration budget")]
    InfeasibleEnumeration(usize),
    #[error("{0} has no layered cut family")]
    NoCutFamily(String),
    #[error("no convergence after {iterations} iterations (P(A) = {p_dead_branch})")]
    NonConvergence { iterations: usize, p_dead_branch: f64 },
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Most cut members the oracle will enumerate.
pub const ORACLE_OBJECT_CAP: usize = 100_000;

/// Weighted minimal cuts of a graded DAG.
#[derive(Clone, Debug)]
pub struct CutFamily {
    pub kind: ObjectiveKind,
    pub cuts: Vec<Cut>,
    pub weights: Vec<f64>,
}

fn as_object(kind: CutKind, t: &crate::dag::Trajectory) -> TrainObject {
    match kind {
        CutKind::StateLayer => TrainObject::State(t.states[0]),
        CutKind::EdgeLayer => TrainObject::Transition(t.states[0], t.states[1]),
        CutKind::PartialTrajectoryLayer => TrainObject::Partial(t.clone()),
        CutKind::CompleteTrajectory => TrainObject::Complete(t.clone()),
    }
}

impl CutFamily {
    /// Distinct members with the total weight of the cuts containing them.
    pub fn objects(&self) -> Vec<(TrainObject, f64)> {
        let mut acc: BTreeMap<Vec<StateId>, (TrainObject, f64)> = BTreeMap::new();
        for (cut, &w) in self.cuts.iter().zip(&self.weights) {
            for m in &cut.members {
                // layer cuts never share members across kinds, so the path is a unique key
                acc.entry(m.states.clone()).or_insert_with(|| (as_object(cut.kind, m), 0.0)).1 += w;
            }
        }
        acc.into_values().collect()
    }
}

/// The layer-wise cut family that interprets `kind`: state layers (FM),
/// edge layers (DB), the complete-trajectory set (TB), or all layer-to-layer
/// trajectory sets weighted by `lambda^(j-i)` (STB).
pub fn layered_cut_families(dag: &FlowDag, kind: &ObjectiveKind) -> Result<CutFamily> {
    if !is_graded(dag) {
        return Err(OracleError::NotGraded);
    }
    let layers = layer_index(dag);
    let depth = layers[dag.sink().index()];
    let (cuts, weights): (Vec<Cut>, Vec<f64>) = match kind.variant {
        ObjectiveVariant::Fm => (1..depth).map(|i| (state_layer_cut(dag, &layers, i), 1.0)).unzip(),
        ObjectiveVariant::Db => (0..depth).map(|i| (edge_layer_cut(dag, &layers, i), 1.0)).unzip(),
        ObjectiveVariant::Tb => (vec![complete_trajectory_cut(dag, ORACLE_OBJECT_CAP)?], vec![1.0]),
        ObjectiveVariant::Stb => {
            let mut cuts = Vec::new();
            let mut weights = Vec::new();
            for i in 0..depth {
                for j in i + 1..=depth {
                    cuts.push(partial_trajectory_cut(dag, &layers, i, j, ORACLE_OBJECT_CAP)?);
                    weights.push(kind.stb_lambda.powi((j - i) as i32));
                }
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            (cuts, weights)
        }
        other => return Err(OracleError::NoCutFamily(other.name().into())),
    };
    let size: usize = cuts.iter().map(|c| c.members.len()).sum();
    if size > ORACLE_OBJECT_CAP {
        return Err(OracleError::InfeasibleEnumeration(size));
    }
    Ok(CutFamily { kind: *kind, cuts, weights })
}

/// Which flow the resampling weights follow.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Forward,
    Backward,
}

/// Which flow the gradient passes through; the other one is held fixed.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Differentiated {
    ForwardParams,
    BackwardParams,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct CorrespondenceCase {
    pub weighting: Weighting,
    pub differentiated: Differentiated,
}

impl CorrespondenceCase {
    pub const ALL: [CorrespondenceCase; 4] = [
        CorrespondenceCase { weighting: Weighting::Forward, differentiated: Differentiated::ForwardParams },
        CorrespondenceCase { weighting: Weighting::Forward, differentiated: Differentiated::BackwardParams },
        CorrespondenceCase { weighting: Weighting::Backward, differentiated: Differentiated::ForwardParams },
        CorrespondenceCase { weighting: Weighting::Backward, differentiated: Differentiated::BackwardParams },
    ];

    pub fn label(&self) -> &'static str {
        match (self.weighting, self.differentiated) {
            (Weighting::Forward, Differentiated::ForwardParams) => "f1",
            (Weighting::Forward, Differentiated::BackwardParams) => "f2",
            (Weighting::Backward, Differentiated::ForwardParams) => "f3",
            (Weighting::Backward, Differentiated::BackwardParams) => "f4",
        }
    }
}

impl fmt::Display for CorrespondenceCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Generator matched to `g` in `case`:
/// f1 = t int_1^t g'(ln s)/s^2 ds, f2 = g(ln t), f3 = t g(ln t),
/// f4 = int_1^t g'(ln s) ds. The integrals go through quadrature.
pub fn case_generator(g: &RegressionLoss, case: CorrespondenceCase) -> Result<FDivergenceSpec> {
    let quad = Quadrature::with_tol(1e-12);
    let name = format!("{}_{}", case.label(), g.name());
    let (a, b) = (g.clone(), g.clone());
    let spec = match case.label() {
        "f1" => FDivergenceSpec::probed(
            &name,
            move |t| f_from_g_with(&a, t, &quad).unwrap_or(f64::NAN),
            move |t| f_from_g_with(&b, t, &quad).unwrap_or(f64::NAN) / t + b.g_prime(t.ln()) / t,
        )?,
        "f2" => FDivergenceSpec::probed(&name, move |t| a.g(t.ln()), move |t| b.g_prime(t.ln()) / t)?,
        "f3" => FDivergenceSpec::probed(&name, move |t| t * a.g(t.ln()), move |t| b.g(t.ln()) + b.g_prime(t.ln()))?,
        _ => FDivergenceSpec::probed(
            &name,
            move |t| {
                let inner = Quadrature { abs_tol: quad.abs_tol / t.max(1.0), ..quad };
                inner.integrate(|u| a.g_prime(u) * u.exp(), 0.0, t.ln()).unwrap_or(f64::NAN)
            },
            move |t| b.g_prime(t.ln()),
        )?,
    };
    Ok(spec)
}

/// Log flows (forward, backward) of every family member, in `objects` order.
fn member_flows(
    env: &Env,
    model: &PolicyModel,
    family: &CutFamily,
    objects: &[(TrainObject, f64)],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let refs: Vec<&TrainObject> = objects.iter().map(|(o, _)| o).collect();
    let mut tape = Tape::new();
    let (pf, pb) = flow_pairs(&mut tape, &family.kind, model, env, &refs)?;
    Ok((tape.value(pf).to_vec(), tape.value(pb).to_vec()))
}

/// `sum_C w(C) D_f(p_B|C || p_F|C)` with unnormalized flows.
pub fn divergence_objective(env: &Env, model: &PolicyModel, family: &CutFamily, f: &FDivergenceSpec) -> Result<f64> {
    let mut total = 0.0;
    for (cut, &w) in family.cuts.iter().zip(&family.weights) {
        if w == 0.0 {
            continue;
        }
        let objects: Vec<(TrainObject, f64)> = cut.members.iter().map(|m| (as_object(cut.kind, m), w)).collect();
        let (pf, pb) = member_flows(env, model, family, &objects)?;
        let p: Vec<f64> = pb.iter().map(|x| x.exp()).collect();
        let q: Vec<f64> = pf.iter().map(|x| x.exp()).collect();
        total += w * f_divergence_slices(&p, &q, f)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrespondenceReport {
    pub max_abs_grad_lhs: f64,
    pub max_rel_error: f64,
    pub per_parameter_errors: Vec<f64>,
    /// Worst disagreement between the divergence gradient and central differences.
    pub fd_max_rel_error: Option<f64>,
    /// False when some flow vanishes and the divergence is infinite.
    pub applicable: bool,
    pub pass: bool,
}

fn rel_errors(lhs: &[f64], rhs: &[f64]) -> Vec<f64> {
    let scale = lhs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    lhs.iter()
        .zip(rhs)
        .map(|(l, r)| {
            let den = l.abs().max(r.abs()).max(1e-6 * scale);
            if den == 0.0 {
                0.0
            } else {
                (l - r).abs() / den
            }
        })
        .collect()
}

/// Gradients of the weighted loss (left) and of the case's divergence
/// objective (right) under `mu(o) = p(o) W(o)`, `p` being the weighting
/// flow held constant.
fn correspondence_gradients(
    env: &Env,
    model: &PolicyModel,
    g: &RegressionLoss,
    f: &FDivergenceSpec,
    case: CorrespondenceCase,
    family: &CutFamily,
    objects: &[(TrainObject, f64)],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let refs: Vec<&TrainObject> = objects.iter().map(|(o, _)| o).collect();
    let cut_weights: Vec<f64> = objects.iter().map(|(_, w)| *w).collect();
    let record = |tape: &mut Tape| -> Result<_> {
        let (pf, pb) = flow_pairs(tape, &family.kind, model, env, &refs)?;
        let (pf, pb) = match case.differentiated {
            Differentiated::ForwardParams => (pf, tape.detach(pb)),
            Differentiated::BackwardParams => (tape.detach(pf), pb),
        };
        Ok((pf, pb))
    };

    let mut tape = Tape::new();
    let (pf, pb) = record(&mut tape)?;
    let weighting = match case.weighting {
        Weighting::Forward => pf,
        Weighting::Backward => pb,
    };
    let mu: Vec<f64> = tape.value(weighting).iter().zip(&cut_weights).map(|(lp, w)| lp.exp() * w).collect();
    let lhs = loss_from_pairs(&mut tape, pf, pb, mu, g, None);
    let lhs_grad = model.store().flat_grad(&tape.backward(lhs.loss)?);

    let mut tape = Tape::new();
    let (pf, pb) = record(&mut tape)?;
    let ratio = tape.sub(pb, pf);
    let fv = tape.map(ratio, |r| {
        let t = r.exp();
        (f.f(t), f.f_prime(t) * t)
    });
    let mass = tape.exp(pf);
    let terms = tape.mul(mass, fv);
    let rhs = tape.weighted_sum(terms, cut_weights);
    let rhs_grad = model.store().flat_grad(&tape.backward(rhs)?);
    Ok((lhs_grad, rhs_grad))
}

/// Compares both gradients parameter by parameter. With `fd_probes > 0`,
/// that many randomly chosen parameters also get a central-difference check
/// of the divergence side, the held-fixed flow frozen at its current value.
#[allow(clippy::too_many_arguments)]
pub fn verify_grad_correspondence<R: Rng>(
    env: &Env,
    model: &PolicyModel,
    g: &RegressionLoss,
    case: CorrespondenceCase,
    family: &CutFamily,
    tol: f64,
    fd_probes: usize,
    rng: &mut R,
) -> Result<CorrespondenceReport> {
    let objects = family.objects();
    let (pf0, pb0) = member_flows(env, model, family, &objects)?;
    if pf0.iter().chain(&pb0).any(|x| !x.is_finite()) {
        return Ok(CorrespondenceReport {
            max_abs_grad_lhs: 0.0,
            max_rel_error: 0.0,
            per_parameter_errors: Vec::new(),
            fd_max_rel_error: None,
            applicable: false,
            pass: true,
        });
    }
    let f = case_generator(g, case)?;
    let (lhs, rhs) = correspondence_gradients(env, model, g, &f, case, family, &objects)?;
    let errors = rel_errors(&lhs, &rhs);
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);

    let fd_max_rel_error = if fd_probes > 0 {
        let flat = model.store().flat();
        let mut idx: Vec<usize> = (0..flat.len()).collect();
        idx.shuffle(rng);
        idx.truncate(fd_probes);
        let scale = rhs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let value = |params: &[f64]| -> Result<f64> {
            let mut probe = model.clone();
            probe.store_mut().set_flat(params)?;
            let (pf, pb) = member_flows(env, &probe, family, &objects)?;
            let (pf, pb) = match case.differentiated {
                Differentiated::ForwardParams => (pf, pb0.clone()),
                Differentiated::BackwardParams => (pf0.clone(), pb),
            };
            Ok(objects
                .iter()
                .zip(pf.iter().zip(&pb))
                .map(|((_, w), (f_, b_))| w * f_.exp() * f.f((b_ - f_).exp()))
                .sum())
        };
        let mut worst = 0.0f64;
        for i in idx {
            let h = 1e-5;
            let mut p = flat.clone();
            p[i] += h;
            let up = value(&p)?;
            p[i] -= 2.0 * h;
            let down = value(&p)?;
            let fd = (up - down) / (2.0 * h);
            let den = fd.abs().max(rhs[i].abs()).max(1e-6 * scale).max(1e-9);
            worst = worst.max((fd - rhs[i]).abs() / den);
        }
        Some(worst)
    } else {
        None
    };

    Ok(CorrespondenceReport {
        max_abs_grad_lhs: lhs.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        max_rel_error,
        per_parameter_errors: errors,
        fd_max_rel_error,
        applicable: true,
        pass: max_rel_error < tol,
    })
}

/// Settings for the full correspondence matrix.
#[derive(Clone, Debug, Serialize)]
pub struct MatrixConfig {
    pub n_dags: usize,
    pub seed: u64,
    pub tol: f64,
    pub fd_tol: f64,
    /// Parameters per configuration that also get a finite-difference check.
    pub fd_probes: usize,
    pub max_trajectories: f64,
    pub stb_lambda: f64,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self { n_dags: 20, seed: 0, tol: 1e-6, fd_tol: 1e-4, fd_probes: 2, max_trajectories: 200.0, stb_lambda: 0.9 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MatrixRow {
    pub dag: usize,
    pub loss: String,
    pub case: &'static str,
    pub family: &'static str,
    pub max_rel_error: f64,
    pub fd_max_rel_error: Option<f64>,
    pub applicable: bool,
    pub pass: bool,
    /// Text form of the DAG when the row fails.
    pub counterexample: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
}

impl MatrixReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_fd_rel_error(&self) -> f64 {
        self.rows.iter().filter_map(|r| r.fd_max_rel_error).fold(0.0, f64::max)
    }
}

/// Random graded DAG with 2-5 layers of width 2-4 and at most
/// `max_trajectories` complete trajectories.
pub fn oracle_dag<R: Rng>(rng: &mut R, max_trajectories: f64) -> FlowDag {
    loop {
        let spec = RandomDagSpec::new(rng.gen_range(2..=5), rng.gen_range(2..=4), 0.5);
        let dag = random_graded_dag(&spec, rng);
        if count_complete_trajectories(&dag) <= max_trajectories {
            return dag;
        }
    }
}

/// Tabular model for `kind` with every parameter drawn from U(-1, 1).
pub fn random_tabular_model<R: Rng>(kind: &ObjectiveKind, env: &Env, rng: &mut R) -> PolicyModel {
    let mut model = PolicyModel::new(ModelKind::Tabular, kind.required_heads(env), env, rng);
    let flat: Vec<f64> = (0..model.store().n_scalars()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    model.store_mut().set_flat(&flat).expect("length matches");
    model
}

pub const FAMILIES: [ObjectiveVariant; 4] =
    [ObjectiveVariant::Fm, ObjectiveVariant::Db, ObjectiveVariant::Tb, ObjectiveVariant::Stb];

/// Every loss x case x family on `n_dags` seeded random DAGs.
pub fn run_correspondence_matrix(config: &MatrixConfig, losses: &[RegressionLoss]) -> Result<MatrixReport> {
    let mut rows = Vec::new();
    for d in 0..config.n_dags {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(d as u64);
        let dag = oracle_dag(&mut rng, config.max_trajectories);
        let env = Env::from_dag("oracle", dag);
        for variant in FAMILIES {
            let kind =
                ObjectiveKind::new(variant).with_backward(BackwardPolicy::Learned).with_lambda(config.stb_lambda);
            let family = layered_cut_families(&env.dag, &kind)?;
            let model = random_tabular_model(&kind, &env, &mut rng);
            for g in losses {
                for case in CorrespondenceCase::ALL {
                    let report = verify_grad_correspondence(
                        &env,
                        &model,
                        g,
                        case,
                        &family,
                        config.tol,
                        config.fd_probes,
                        &mut rng,
                    )?;
                    let fd_ok = report.fd_max_rel_error.is_none_or(|e| e < config.fd_tol);
                    let pass = report.pass && fd_ok;
                    rows.push(MatrixRow {
                        dag: d,
                        loss: g.name().to_string(),
                        case: case.label(),
                        family: variant.name(),
                        max_rel_error: report.max_rel_error,
                        fd_max_rel_error: report.fd_max_rel_error,
                        applicable: report.applicable,
                        pass,
                        counterexample: (!pass).then(|| write_dag(&env.dag)),
                    });
                }
            }
        }
    }
    Ok(MatrixReport { rows })
}

/// Gradient of the generalized KL `sum_tau pF log(pF/pB) - pF + pB` over
/// complete trajectories of a tabular TB model with respect to its forward
/// logits and log Z, written out by hand; the backward flow is held fixed.
/// Returned in the model's flat parameter order.
pub fn reverse_kl_gradient(env: &Env, model: &PolicyModel) -> Result<Vec<f64>> {
    let dag = &env.dag;
    let heads = model.heads().clone();
    let width = heads.out_width();
    let table_id = model.table_param().ok_or(ObjectiveError::MissingModelHead("table"))?;
    let z_id = model.log_z_param().ok_or(ObjectiveError::MissingModelHead("total flow"))?;
    let table = &model.store().get(table_id).data;
    let log_z = model.store().get(z_id).data[0];
    // forward probabilities by hand: softmax over each state's child slots
    let prob = |s: StateId| -> Vec<f64> {
        let slots = env.layout.forward_slots(s);
        let logits: Vec<f64> = slots.iter().map(|&k| table[s.index() * width + k as usize]).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    };
    let backward = |s: StateId| -> Vec<f64> {
        if heads.backward_width == 0 {
            let k = dag.parents(s).len();
            return vec![1.0 / k as f64; k];
        }
        let slots = env.layout.backward_slots(s);
        let off = heads.backward_offset();
        let logits: Vec<f64> = slots.iter().map(|&k| table[s.index() * width + off + k as usize]).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    };
    let mut grad_table = vec![0.0; table.len()];
    let mut grad_z = 0.0;
    for tau in complete_trajectory_cut(dag, ORACLE_OBJECT_CAP)?.members {
        let mut pf = log_z.exp();
        let mut pb = dag.reward(tau.states[tau.states.len() - 2]);
        for (a, b) in tau.edges() {
            pf *= prob(a)[dag.child_index(a, b).unwrap()];
            if b != dag.sink() {
                pb *= backward(b)[dag.parent_index(b, a).unwrap()];
            }
        }
        // d/dtheta of the term is pF log(pF/pB) * d log pF
        let coef = pf * (pf / pb).ln();
        grad_z += coef;
        for (a, b) in tau.edges() {
            let p = prob(a);
            let chosen = dag.child_index(a, b).unwrap();
            for (i, &slot) in env.layout.forward_slots(a).iter().enumerate() {
                let indicator = if i == chosen { 1.0 } else { 0.0 };
                grad_table[a.index() * width + slot as usize] += coef * (indicator - p[i]);
            }
        }
    }
    let mut flat = Vec::with_capacity(model.store().n_scalars());
    for (id, t) in model.store().iter().enumerate() {
        if id == table_id {
            flat.extend_from_slice(&grad_table);
        } else if id == z_id {
            flat.push(grad_z);
        } else {
            flat.extend(std::iter::repeat_n(0.0, t.data.len()));
        }
    }
    Ok(flat)
}

/// Forward-weighted, forward-differentiated quadratic loss gradient on
/// the trajectory cut against [`reverse_kl_gradient`]; returns the largest
/// absolute difference.
pub fn reverse_kl_special_case(env: &Env, model: &PolicyModel) -> Result<f64> {
    let kind = ObjectiveKind::new(ObjectiveVariant::Tb).with_backward(if model.heads().backward_width > 0 {
        BackwardPolicy::Learned
    } else {
        BackwardPolicy::Uniform
    });
    let family = layered_cut_families(&env.dag, &kind)?;
    let objects = family.objects();
    let g = RegressionLoss::builtin(crate::losses::BuiltinLoss::Quadratic);
    let refs: Vec<&TrainObject> = objects.iter().map(|(o, _)| o).collect();
    let mut tape = Tape::new();
    let (pf, pb) = flow_pairs(&mut tape, &kind, model, env, &refs)?;
    let pb = tape.detach(pb);
    let mu: Vec<f64> = tape.value(pf).iter().map(|x| x.exp()).collect();
    let lhs = loss_from_pairs(&mut tape, pf, pb, mu, &g, None);
    let lhs = model.store().flat_grad(&tape.backward(lhs.loss)?);
    let direct = reverse_kl_gradient(env, model)?;
    Ok(lhs.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests;
