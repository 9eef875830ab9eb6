//! Forward/backward flow pairs of training objects and the unified
//! objective `sum_o w(o) g(log p_B(o) - log p_F(o))`.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{StateId, Trajectory};
use crate::envs::Env;
use crate::losses::RegressionLoss;
use crate::model::{HeadLayout, HeadMode, PolicyModel, Tape, TapeError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("{object} is not a training object of {kind}")]
    IncompatibleObject { kind: String, object: String },
    #[error("model lacks the {0} head")]
    MissingModelHead(&'static str),
    #[error("modified objectives need every state to terminate with positive reward; state {0} does not")]
    ModifiedVariantPreconditionViolated(StateId),
    #[error("forward-looking objectives need a positive reward at state {0}")]
    MissingIntermediateReward(StateId),
    #[error("invalid training object: {0}")]
    InvalidObject(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid batch weight {0}")]
    InvalidWeight(f64),
    #[error("sub-trajectory lambda must be positive, got {0}")]
    InvalidLambda(f64),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveVariant {
    Fm,
    Db,
    Tb,
    Stb,
    FlDb,
    FlStb,
    ModDb,
    ModStb,
}

impl ObjectiveVariant {
    pub const ALL: [ObjectiveVariant; 8] = [
        ObjectiveVariant::Fm,
        ObjectiveVariant::Db,
        ObjectiveVariant::Tb,
        ObjectiveVariant::Stb,
        ObjectiveVariant::FlDb,
        ObjectiveVariant::FlStb,
        ObjectiveVariant::ModDb,
        ObjectiveVariant::ModStb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveVariant::Fm => "fm",
            ObjectiveVariant::Db => "db",
            ObjectiveVariant::Tb => "tb",
            ObjectiveVariant::Stb => "stb",
            ObjectiveVariant::FlDb => "fl_db",
            ObjectiveVariant::FlStb => "fl_stb",
            ObjectiveVariant::ModDb => "mod_db",
            ObjectiveVariant::ModStb => "mod_stb",
        }
    }

    fn is_transition_based(self) -> bool {
        matches!(self, ObjectiveVariant::Db | ObjectiveVariant::FlDb | ObjectiveVariant::ModDb)
    }

    fn is_subtrajectory_based(self) -> bool {
        matches!(self, ObjectiveVariant::Stb | ObjectiveVariant::FlStb | ObjectiveVariant::ModStb)
    }

    fn is_forward_looking(self) -> bool {
        matches!(self, ObjectiveVariant::FlDb | ObjectiveVariant::FlStb)
    }

    fn is_modified(self) -> bool {
        matches!(self, ObjectiveVariant::ModDb | ObjectiveVariant::ModStb)
    }
}

impl fmt::Display for ObjectiveVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardPolicy {
    Uniform,
    Learned,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveKind {
    pub variant: ObjectiveVariant,
    pub backward: BackwardPolicy,
    /// Decay of sub-trajectory weights; used by the sub-trajectory variants.
    pub stb_lambda: f64,
}

impl ObjectiveKind {
    pub fn new(variant: ObjectiveVariant) -> Self {
        Self { variant, backward: BackwardPolicy::Uniform, stb_lambda: 0.9 }
    }

    pub fn with_backward(mut self, backward: BackwardPolicy) -> Self {
        self.backward = backward;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.stb_lambda = lambda;
        self
    }

    /// Flow matching has no backward policy; it is reported as uniform.
    pub fn effective_backward(&self) -> BackwardPolicy {
        match self.variant {
            ObjectiveVariant::Fm => BackwardPolicy::Uniform,
            _ => self.backward,
        }
    }

    /// Heads a model must expose to evaluate this objective on `env`.
    pub fn required_heads(&self, env: &Env) -> HeadLayout {
        let v = self.variant;
        HeadLayout {
            mode: if v == ObjectiveVariant::Fm { HeadMode::EdgeFlow } else { HeadMode::Policy },
            forward_width: env.layout.forward_width,
            backward_width: match self.effective_backward() {
                BackwardPolicy::Learned => env.layout.backward_width,
                BackwardPolicy::Uniform => 0,
            },
            state_flow: matches!(
                v,
                ObjectiveVariant::Db | ObjectiveVariant::Stb | ObjectiveVariant::FlDb | ObjectiveVariant::FlStb
            ),
            total_flow: v == ObjectiveVariant::Tb,
        }
    }

    /// Checks the objective against the environment's rewards.
    pub fn check_env(&self, env: &Env) -> Result<()> {
        if self.variant.is_subtrajectory_based() && !(self.stb_lambda > 0.0 && self.stb_lambda.is_finite()) {
            return Err(ObjectiveError::InvalidLambda(self.stb_lambda));
        }
        let dag = &env.dag;
        for s in (0..dag.n_states()).map(StateId::from).filter(|&s| s != dag.sink()) {
            if self.variant.is_modified() && !(dag.is_terminating(s) && dag.reward(s) > 0.0) {
                return Err(ObjectiveError::ModifiedVariantPreconditionViolated(s));
            }
            if self.variant.is_forward_looking() && !dag.extended_reward(s).is_some_and(|r| r > 0.0) {
                return Err(ObjectiveError::MissingIntermediateReward(s));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.variant.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TrainObject {
    State(StateId),
    Transition(StateId, StateId),
    Partial(Trajectory),
    Complete(Trajectory),
}

impl fmt::Display for TrainObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainObject::State(s) => write!(f, "state {s}"),
            TrainObject::Transition(u, v) => write!(f, "transition {u}->{v}"),
            TrainObject::Partial(t) => write!(f, "partial trajectory {:?}", t.states),
            TrainObject::Complete(t) => write!(f, "complete trajectory {:?}", t.states),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub log_pf: f64,
    pub log_pb: f64,
}

impl FlowPair {
    pub fn log_ratio(&self) -> f64 {
        self.log_pb - self.log_pf
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightedBatch {
    pub items: Vec<(TrainObject, f64)>,
}

impl WeightedBatch {
    pub fn new(items: Vec<(TrainObject, f64)>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Every contiguous sub-trajectory `i < j` of `traj` with weight
/// `lambda^(j-i)` normalized to sum one, shortest first.
pub fn subtb_object_weights(traj: &Trajectory, lambda: f64) -> Vec<(Trajectory, f64)> {
    let len = traj.len_edges();
    let mut out = Vec::with_capacity(len * (len + 1) / 2);
    let mut total = 0.0;
    for span in 1..=len {
        let w = lambda.powi(span as i32);
        for i in 0..=len - span {
            out.push((Trajectory::new(traj.states[i..=i + span].to_vec()), w));
            total += w;
        }
    }
    for (_, w) in &mut out {
        *w /= total;
    }
    out
}

fn check_object(kind: &ObjectiveKind, env: &Env, o: &TrainObject) -> Result<()> {
    let dag = &env.dag;
    let v = kind.variant;
    let incompatible = || ObjectiveError::IncompatibleObject { kind: v.name().into(), object: o.to_string() };
    let valid_path =
        |t: &Trajectory| t.states.len() >= 2 && t.states.iter().all(|s| s.index() < dag.n_states()) && t.is_valid(dag);
    match o {
        TrainObject::State(s) => {
            if v != ObjectiveVariant::Fm {
                return Err(incompatible());
            }
            if s.index() >= dag.n_states() || *s == dag.source() || *s == dag.sink() {
                return Err(ObjectiveError::InvalidObject(format!("flow matching needs an interior state, got {s}")));
            }
        }
        TrainObject::Transition(a, b) => {
            if !v.is_transition_based() {
                return Err(incompatible());
            }
            if a.index() >= dag.n_states() || b.index() >= dag.n_states() || !dag.has_edge(*a, *b) {
                return Err(ObjectiveError::InvalidObject(format!("{a}->{b} is not an edge")));
            }
        }
        TrainObject::Partial(t) => {
            if !v.is_subtrajectory_based() {
                return Err(incompatible());
            }
            if !valid_path(t) {
                return Err(ObjectiveError::InvalidObject(format!("{:?} is not a path", t.states)));
            }
        }
        TrainObject::Complete(t) => {
            if v != ObjectiveVariant::Tb {
                return Err(incompatible());
            }
            if !valid_path(t) || !t.is_complete(dag) {
                return Err(ObjectiveError::InvalidObject(format!("{:?} is not a complete trajectory", t.states)));
            }
        }
    }
    Ok(())
}

/// Index bookkeeping for one side (forward or backward) of every object.
struct Side {
    backward: bool,
    /// Flat indices into the log policy this side uses.
    policy: Vec<Vec<usize>>,
    /// Flat indices into the forward log policy, subtracted.
    sink_policy: Vec<Vec<usize>>,
    /// Rows of the state-flow column.
    flow: Vec<Vec<usize>>,
    constant: Vec<f64>,
}

impl Side {
    fn new(n: usize, backward: bool) -> Self {
        Self {
            backward,
            policy: vec![Vec::new(); n],
            sink_policy: vec![Vec::new(); n],
            flow: vec![Vec::new(); n],
            constant: vec![0.0; n],
        }
    }
}

/// Log forward and backward flows of `objects` as two column vectors on `tape`.
pub fn flow_pairs(
    tape: &mut Tape,
    kind: &ObjectiveKind,
    model: &PolicyModel,
    env: &Env,
    objects: &[&TrainObject],
) -> Result<(Var, Var)> {
    let heads = model.heads();
    let needed = kind.required_heads(env);
    if needed.mode != heads.mode {
        return Err(ObjectiveError::MissingModelHead(if needed.mode == HeadMode::EdgeFlow {
            "edge flow"
        } else {
            "forward policy"
        }));
    }
    if needed.state_flow && !heads.state_flow {
        return Err(ObjectiveError::MissingModelHead("state flow"));
    }
    if needed.total_flow && !heads.total_flow {
        return Err(ObjectiveError::MissingModelHead("total flow"));
    }
    if needed.backward_width > 0 && heads.backward_width == 0 {
        return Err(ObjectiveError::MissingModelHead("backward policy"));
    }
    kind.check_env(env)?;
    for o in objects {
        check_object(kind, env, o)?;
    }
    let dag = &env.dag;
    let sink = dag.sink();

    // rows of the model output, one per distinct state touched
    let mut row_of: HashMap<StateId, usize> = HashMap::new();
    let mut states: Vec<StateId> = Vec::new();
    let mut row = |s: StateId, states: &mut Vec<StateId>| -> usize {
        *row_of.entry(s).or_insert_with(|| {
            states.push(s);
            states.len() - 1
        })
    };

    let n = objects.len();
    let mut fwd = Side::new(n, false);
    let mut bwd = Side::new(n, true);
    let fw = heads.forward_width;
    let bw = heads.backward_width;
    let width = heads.out_width();
    let learned = bw > 0 && kind.variant != ObjectiveVariant::Fm;

    if kind.variant == ObjectiveVariant::Fm {
        // policy slots index the edge-flow logits directly
        for (k, o) in objects.iter().enumerate() {
            let TrainObject::State(s) = o else { unreachable!() };
            let rs = row(*s, &mut states);
            for &p in dag.parents(*s) {
                let rp = row(p, &mut states);
                let slot = env.layout.forward_slot(dag, p, *s).unwrap();
                fwd.policy[k].push(rp * width + slot);
            }
            for &slot in env.layout.forward_slots(*s) {
                bwd.policy[k].push(rs * width + slot as usize);
            }
        }
        let out = model.outputs(tape, env, &states);
        let flows = model.forward_logits(tape, env, &states, out);
        let pf = tape.segment_logsumexp(flows, fwd.policy);
        let pb = tape.segment_logsumexp(flows, bwd.policy);
        return Ok((pf, pb));
    }

    let v = kind.variant;
    // Adds the log state flow of `s` to one side.
    let add_flow = |side: &mut Side, k: usize, s: StateId, r: usize| {
        if v.is_forward_looking() || v.is_modified() {
            side.constant[k] += dag.extended_reward(s).unwrap_or(0.0).ln();
        }
        if v.is_modified() {
            // F(s) = R(s) / P_F(sink | s)
            let slot = env.layout.forward_slot(dag, s, sink).expect("checked by check_env");
            side.sink_policy[k].push(r * fw + slot);
        } else {
            side.flow[k].push(r);
        }
    };

    for (k, o) in objects.iter().enumerate() {
        let path: &[StateId] = match o {
            TrainObject::Transition(a, b) => &[*a, *b],
            TrainObject::Partial(t) | TrainObject::Complete(t) => &t.states,
            TrainObject::State(_) => unreachable!(),
        };
        let first = path[0];
        let last = path[path.len() - 1];
        if !matches!(o, TrainObject::Complete(_)) {
            let r = row(first, &mut states);
            add_flow(&mut fwd, k, first, r);
        }
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            let ra = row(a, &mut states);
            fwd.policy[k].push(ra * fw + env.layout.forward_slot(dag, a, b).unwrap());
            if b == sink {
                continue;
            }
            if learned {
                let rb = row(b, &mut states);
                bwd.policy[k].push(rb * bw + env.layout.backward_slot(dag, b, a).unwrap());
            } else {
                bwd.constant[k] -= (dag.parents(b).len() as f64).ln();
            }
        }
        if last == sink {
            bwd.constant[k] += dag.reward(path[path.len() - 2]).ln();
        } else {
            let r = row(last, &mut states);
            add_flow(&mut bwd, k, last, r);
        }
    }

    let out = model.outputs(tape, env, &states);
    let lpf = model.forward_log_probs(tape, env, &states, out);
    let lpb = if learned { model.backward_log_probs(tape, env, &states, out) } else { None };
    let flows = heads.state_flow_col().filter(|_| !v.is_modified()).map(|col| {
        let idx = (0..states.len()).map(|r| r * width + col).collect();
        tape.gather(out, idx)
    });
    let log_z = if v == ObjectiveVariant::Tb { model.log_z(tape) } else { None };
    let pf = assemble(tape, fwd, lpf, lpb, flows, log_z);
    let pb = assemble(tape, bwd, lpf, lpb, flows, None);
    Ok((pf, pb))
}

/// Sums the policy, flow and constant terms of one side.
fn assemble(tape: &mut Tape, side: Side, lpf: Var, lpb: Option<Var>, flows: Option<Var>, log_z: Option<Var>) -> Var {
    let n = side.constant.len();
    let mut acc = tape.constant(n, 1, vec![0.0; n]);
    let has = |lists: &[Vec<usize>]| lists.iter().any(|l| !l.is_empty());
    if has(&side.policy) {
        // forward side indexes lpf, backward side indexes lpb
        let src = if side.backward { lpb.expect("learned backward policy") } else { lpf };
        let t = tape.segment_sum(src, side.policy);
        acc = tape.add(acc, t);
    }
    if has(&side.sink_policy) {
        let t = tape.segment_sum(lpf, side.sink_policy);
        acc = tape.sub(acc, t);
    }
    if has(&side.flow) {
        let t = tape.segment_sum(flows.expect("state flow head"), side.flow);
        acc = tape.add(acc, t);
    }
    if let Some(z) = log_z {
        acc = tape.add_scalar(acc, z);
    }
    tape.add_const(acc, side.constant)
}

/// Log flows of a single object, without gradients.
pub fn flow_pair(kind: &ObjectiveKind, model: &PolicyModel, env: &Env, o: &TrainObject) -> Result<FlowPair> {
    let mut tape = Tape::new();
    let (pf, pb) = flow_pairs(&mut tape, kind, model, env, &[o])?;
    Ok(FlowPair { log_pf: tape.scalar(pf), log_pb: tape.scalar(pb) })
}

/// The recorded objective plus diagnostics about its log-ratios.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: Var,
    pub value: f64,
    /// Unclamped `log p_B - log p_F` per batch item.
    pub log_ratios: Vec<f64>,
    /// How many log-ratios were clamped.
    pub clamped: usize,
}

/// `sum_i w_i g(clamp(log p_B - log p_F))`; weights are constants and a
/// clamped log-ratio passes no gradient.
pub fn unified_loss(
    tape: &mut Tape,
    batch: &WeightedBatch,
    kind: &ObjectiveKind,
    model: &PolicyModel,
    env: &Env,
    g: &RegressionLoss,
    clamp: Option<f64>,
) -> Result<LossEval> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    for (_, w) in &batch.items {
        if !(w.is_finite() && *w >= 0.0) {
            return Err(ObjectiveError::InvalidWeight(*w));
        }
    }
    let objects: Vec<&TrainObject> = batch.items.iter().map(|(o, _)| o).collect();
    let (pf, pb) = flow_pairs(tape, kind, model, env, &objects)?;
    let weights = batch.items.iter().map(|(_, w)| *w).collect();
    Ok(loss_from_pairs(tape, pf, pb, weights, g, clamp))
}

/// The weighted regression loss over already recorded flow pairs.
pub fn loss_from_pairs(
    tape: &mut Tape,
    pf: Var,
    pb: Var,
    weights: Vec<f64>,
    g: &RegressionLoss,
    clamp: Option<f64>,
) -> LossEval {
    let ratio = tape.sub(pb, pf);
    let log_ratios = tape.value(ratio).to_vec();
    let clamped = match clamp {
        Some(c) => log_ratios.iter().filter(|t| !(t.abs() <= c)).count(),
        None => 0,
    };
    let gv = tape.map(ratio, |t| match clamp {
        Some(c) if !(t.abs() <= c) => {
            let tc = if t.is_nan() { 0.0 } else { t.clamp(-c, c) };
            (g.g(tc), 0.0)
        }
        _ => g.value_and_slope(t),
    });
    let loss = tape.weighted_sum(gv, weights);
    LossEval { loss, value: tape.scalar(loss), log_ratios, clamped }
}
