//! Flow networks as directed acyclic graphs.
//!
//! A [`FlowDag`] has a single source, a single sink, and a reward on every
//! state that links directly into the sink (the terminating states). Child
//! and parent lists are kept sorted by state index; that order defines the
//! logit order everywhere else in the crate.

mod cuts;
mod text;

pub use cuts::{complete_trajectory_cut, edge_layer_cut, partial_trajectory_cut, state_layer_cut, Cut, CutKind};
pub use text::{parse_dag, write_dag};

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Default cap on the number of complete trajectories that enumeration will materialize.
pub const DEFAULT_TRAJECTORY_CAP: usize = 1_000_000;

/// Tolerance on the per-state sum of forward probabilities.
pub const POLICY_NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DagError {
    #[error("cycle detected through state {0}")]
    CycleDetected(StateId),
    #[error("state {0} is not reachable from the source")]
    UnreachableState(StateId),
    #[error("sink is not reachable from state {0}")]
    SinkNotReachable(StateId),
    #[error("terminating state {0} has negative reward {1}")]
    NegativeReward(StateId, f64),
    #[error("terminating state {0} has no reward")]
    MissingReward(StateId),
    #[error("all terminal rewards are zero")]
    AllRewardsZero,
    #[error("state {0} out of range for a DAG with {1} states")]
    StateOutOfRange(StateId, usize),
    #[error("source and sink must be distinct")]
    SourceIsSink,
    #[error("sink has outgoing edge to {0}")]
    SinkHasChildren(StateId),
    #[error("more than {0} complete trajectories")]
    TrajectoryBudgetExceeded(usize),
    #[error("forward policy at state {state} sums to {sum}")]
    PolicyNotNormalized { state: StateId, sum: f64 },
    #[error("policy table shape does not match the DAG at state {0}")]
    PolicyShape(StateId),
    #[error("DAG is not graded")]
    NotGraded,
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Dense per-DAG state identifier.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateId(pub u32);

impl StateId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for StateId {
    fn from(i: usize) -> Self {
        StateId(i as u32)
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ordered list of states; complete when it runs from source to sink.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Trajectory {
    pub states: Vec<StateId>,
}

impl Trajectory {
    pub fn new(states: Vec<StateId>) -> Self {
        Self { states }
    }

    pub fn len_edges(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn first(&self) -> StateId {
        self.states[0]
    }

    pub fn last(&self) -> StateId {
        *self.states.last().expect("empty trajectory")
    }

    pub fn is_complete(&self, dag: &FlowDag) -> bool {
        !self.states.is_empty() && self.first() == dag.source() && self.last() == dag.sink()
    }

    /// Consecutive states are edges of `dag`.
    pub fn is_valid(&self, dag: &FlowDag) -> bool {
        !self.states.is_empty()
            && self.states.iter().all(|s| s.index() < dag.n_states())
            && self.states.windows(2).all(|w| dag.has_edge(w[0], w[1]))
    }

    /// True when `part` occurs as a contiguous run inside this trajectory.
    pub fn contains(&self, part: &Trajectory) -> bool {
        let n = part.states.len();
        n > 0 && self.states.windows(n).any(|w| w == part.states.as_slice())
    }

    pub fn edges(&self) -> impl Iterator<Item = (StateId, StateId)> + '_ {
        self.states.windows(2).map(|w| (w[0], w[1]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowDag {
    source: StateId,
    sink: StateId,
    children: Vec<Vec<StateId>>,
    parents: Vec<Vec<StateId>>,
    rewards: Vec<Option<f64>>,
    terminating: Vec<bool>,
    virtual_states: Vec<bool>,
    topo: Vec<StateId>,
}

/// Incremental construction of a [`FlowDag`].
#[derive(Clone, Debug)]
pub struct FlowDagBuilder {
    n_states: usize,
    source: StateId,
    sink: StateId,
    edges: Vec<(StateId, StateId)>,
    rewards: Vec<Option<f64>>,
    virtual_states: Vec<bool>,
}

impl FlowDagBuilder {
    pub fn new(n_states: usize, source: StateId, sink: StateId) -> Self {
        Self {
            n_states,
            source,
            sink,
            edges: Vec::new(),
            rewards: vec![None; n_states],
            virtual_states: vec![false; n_states],
        }
    }

    pub fn edge(&mut self, from: impl Into<StateId>, to: impl Into<StateId>) -> &mut Self {
        self.edges.push((from.into(), to.into()));
        self
    }

    /// Sets the reward of `s`. On non-terminating states this is the
    /// intermediate (extended) reward used by forward-looking objectives.
    pub fn reward(&mut self, s: impl Into<StateId>, r: f64) -> &mut Self {
        let s = s.into();
        if s.index() < self.n_states {
            self.rewards[s.index()] = Some(r);
        }
        self
    }

    pub fn mark_virtual(&mut self, s: impl Into<StateId>) -> &mut Self {
        let s = s.into();
        if s.index() < self.n_states {
            self.virtual_states[s.index()] = true;
        }
        self
    }

    /// Assembles the graph without checking the flow-network invariants.
    pub fn build_unchecked(&self) -> Result<FlowDag, DagError> {
        let n = self.n_states;
        for s in [self.source, self.sink] {
            if s.index() >= n {
                return Err(DagError::StateOutOfRange(s, n));
            }
        }
        if self.source == self.sink {
            return Err(DagError::SourceIsSink);
        }
        let mut children = vec![Vec::new(); n];
        let mut parents = vec![Vec::new(); n];
        for &(u, v) in &self.edges {
            for s in [u, v] {
                if s.index() >= n {
                    return Err(DagError::StateOutOfRange(s, n));
                }
            }
            if u == self.sink {
                return Err(DagError::SinkHasChildren(v));
            }
            children[u.index()].push(v);
            parents[v.index()].push(u);
        }
        for list in children.iter_mut().chain(parents.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        let terminating = (0..n).map(|s| children[s].contains(&self.sink)).collect();
        Ok(FlowDag {
            source: self.source,
            sink: self.sink,
            children,
            parents,
            rewards: self.rewards.clone(),
            terminating,
            virtual_states: self.virtual_states.clone(),
            topo: Vec::new(),
        })
    }

    pub fn build(&self) -> Result<FlowDag, DagError> {
        let mut dag = self.build_unchecked()?;
        dag.topo = validate_dag(&dag)?;
        Ok(dag)
    }
}

impl FlowDag {
    pub fn n_states(&self) -> usize {
        self.children.len()
    }

    pub fn n_edges(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    pub fn source(&self) -> StateId {
        self.source
    }

    pub fn sink(&self) -> StateId {
        self.sink
    }

    pub fn children(&self, s: StateId) -> &[StateId] {
        &self.children[s.index()]
    }

    pub fn parents(&self, s: StateId) -> &[StateId] {
        &self.parents[s.index()]
    }

    pub fn has_edge(&self, u: StateId, v: StateId) -> bool {
        self.children[u.index()].binary_search(&v).is_ok()
    }

    /// Position of `child` in the sorted child list of `s`.
    pub fn child_index(&self, s: StateId, child: StateId) -> Option<usize> {
        self.children[s.index()].binary_search(&child).ok()
    }

    pub fn parent_index(&self, s: StateId, parent: StateId) -> Option<usize> {
        self.parents[s.index()].binary_search(&parent).ok()
    }

    pub fn is_terminating(&self, s: StateId) -> bool {
        self.terminating[s.index()]
    }

    pub fn terminating_states(&self) -> Vec<StateId> {
        (0..self.n_states()).filter(|&s| self.terminating[s]).map(StateId::from).collect()
    }

    /// Terminal reward; zero on non-terminating states.
    pub fn reward(&self, s: StateId) -> f64 {
        if self.terminating[s.index()] {
            self.rewards[s.index()].unwrap_or(0.0)
        } else {
            0.0
        }
    }

    /// Reward extended to the whole state space, when provided.
    pub fn extended_reward(&self, s: StateId) -> Option<f64> {
        self.rewards[s.index()]
    }

    /// True when every non-sink state carries a reward.
    pub fn has_intermediate_rewards(&self) -> bool {
        (0..self.n_states()).filter(|&s| s != self.sink.index()).all(|s| self.rewards[s].is_some())
    }

    pub fn is_virtual(&self, s: StateId) -> bool {
        self.virtual_states[s.index()]
    }

    pub fn n_virtual(&self) -> usize {
        self.virtual_states.iter().filter(|&&v| v).count()
    }

    /// States in topological order (source first, sink last).
    pub fn topological_order(&self) -> &[StateId] {
        &self.topo
    }

    pub fn edges(&self) -> impl Iterator<Item = (StateId, StateId)> + '_ {
        self.children.iter().enumerate().flat_map(|(u, cs)| cs.iter().map(move |&v| (StateId::from(u), v)))
    }

    pub fn total_reward(&self) -> f64 {
        self.terminating_states().into_iter().map(|s| self.reward(s)).sum()
    }

    pub fn max_out_degree(&self) -> usize {
        self.children.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn max_in_degree(&self) -> usize {
        self.parents.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn builder(&self) -> FlowDagBuilder {
        let mut b = FlowDagBuilder::new(self.n_states(), self.source, self.sink);
        for (u, v) in self.edges() {
            b.edge(u, v);
        }
        b.rewards = self.rewards.clone();
        b.virtual_states = self.virtual_states.clone();
        b
    }
}

fn topological_sort(dag: &FlowDag) -> Result<Vec<StateId>, DagError> {
    let n = dag.n_states();
    let mut indeg: Vec<usize> = (0..n).map(|s| dag.parents[s].len()).collect();
    // Kahn's algorithm with a min-heap keeps the order deterministic.
    let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<StateId>> =
        (0..n).filter(|&s| indeg[s] == 0).map(|s| std::cmp::Reverse(StateId::from(s))).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(std::cmp::Reverse(s)) = ready.pop() {
        order.push(s);
        for &c in &dag.children[s.index()] {
            indeg[c.index()] -= 1;
            if indeg[c.index()] == 0 {
                ready.push(std::cmp::Reverse(c));
            }
        }
    }
    if order.len() < n {
        let stuck = (0..n).find(|&s| indeg[s] > 0).unwrap();
        return Err(DagError::CycleDetected(StateId::from(stuck)));
    }
    Ok(order)
}

/// Checks every flow-network invariant; returns a topological order on success.
pub fn validate_dag(dag: &FlowDag) -> Result<Vec<StateId>, DagError> {
    let order = topological_sort(dag)?;
    let n = dag.n_states();

    let mut seen = vec![false; n];
    let mut stack = vec![dag.source];
    seen[dag.source.index()] = true;
    while let Some(s) = stack.pop() {
        for &c in dag.children(s) {
            if !seen[c.index()] {
                seen[c.index()] = true;
                stack.push(c);
            }
        }
    }
    if let Some(s) = (0..n).find(|&s| !seen[s]) {
        return Err(DagError::UnreachableState(StateId::from(s)));
    }

    let mut reaches = vec![false; n];
    let mut stack = vec![dag.sink];
    reaches[dag.sink.index()] = true;
    while let Some(s) = stack.pop() {
        for &p in dag.parents(s) {
            if !reaches[p.index()] {
                reaches[p.index()] = true;
                stack.push(p);
            }
        }
    }
    if let Some(s) = (0..n).find(|&s| !reaches[s]) {
        return Err(DagError::SinkNotReachable(StateId::from(s)));
    }

    let mut total = 0.0;
    for s in dag.terminating_states() {
        match dag.rewards[s.index()] {
            None => return Err(DagError::MissingReward(s)),
            Some(r) if !(r >= 0.0) => return Err(DagError::NegativeReward(s, r)),
            Some(r) => total += r,
        }
    }
    if !(total > 0.0) {
        return Err(DagError::AllRewardsZero);
    }
    Ok(order)
}

/// Number of complete trajectories, by dynamic programming over the topological order.
pub fn count_complete_trajectories(dag: &FlowDag) -> f64 {
    let mut paths = vec![0.0f64; dag.n_states()];
    paths[dag.source.index()] = 1.0;
    for &s in dag.topological_order() {
        let p = paths[s.index()];
        for &c in dag.children(s) {
            paths[c.index()] += p;
        }
    }
    paths[dag.sink.index()]
}

/// Every complete trajectory exactly once, in lexicographic order of state indices.
pub fn enumerate_complete_trajectories(dag: &FlowDag, cap: usize) -> Result<Vec<Trajectory>, DagError> {
    if count_complete_trajectories(dag) > cap as f64 {
        return Err(DagError::TrajectoryBudgetExceeded(cap));
    }
    enumerate_paths(dag, dag.source, &|s| s == dag.sink, cap)
}

/// All paths starting at `start` and ending at the first state satisfying `stop`.
pub(crate) fn enumerate_paths(
    dag: &FlowDag,
    start: StateId,
    stop: &dyn Fn(StateId) -> bool,
    cap: usize,
) -> Result<Vec<Trajectory>, DagError> {
    let mut out = Vec::new();
    let mut path = vec![start];
    // Explicit DFS stack of (state, next child position).
    let mut stack: Vec<(StateId, usize)> = vec![(start, 0)];
    if stop(start) {
        return Ok(vec![Trajectory::new(path)]);
    }
    while let Some((s, pos)) = stack.last_mut() {
        let s = *s;
        let kids = dag.children(s);
        if *pos >= kids.len() {
            stack.pop();
            path.pop();
            continue;
        }
        let c = kids[*pos];
        *pos += 1;
        path.push(c);
        if stop(c) {
            out.push(Trajectory::new(path.clone()));
            if out.len() > cap {
                return Err(DagError::TrajectoryBudgetExceeded(cap));
            }
            path.pop();
        } else {
            stack.push((c, 0));
        }
    }
    Ok(out)
}

/// Longest-path layer of every state; the source sits in layer 0.
pub fn layer_index(dag: &FlowDag) -> Vec<usize> {
    let mut layer = vec![0usize; dag.n_states()];
    for &s in dag.topological_order() {
        let l = layer[s.index()];
        for &c in dag.children(s) {
            layer[c.index()] = layer[c.index()].max(l + 1);
        }
    }
    layer
}

/// Every edge spans adjacent layers.
pub fn is_graded(dag: &FlowDag) -> bool {
    let layer = layer_index(dag);
    dag.edges().all(|(u, v)| layer[v.index()] == layer[u.index()] + 1)
}

/// Splits every layer-skipping edge `s -> s'` into a chain through
/// `l(s') - l(s) - 1` virtual states so that the result is graded.
///
/// New states are appended after the original ones and flagged virtual; the
/// sink keeps its id. When a skipped edge led into the sink, the last virtual
/// state of the chain becomes terminating and carries the original reward.
/// Already-graded input is returned unchanged.
pub fn insert_virtual_states(dag: &FlowDag) -> FlowDag {
    let layer = layer_index(dag);
    let extra: usize = dag.edges().map(|(u, v)| layer[v.index()] - layer[u.index()] - 1).sum();
    if extra == 0 {
        return dag.clone();
    }
    let n = dag.n_states();
    let mut b = FlowDagBuilder::new(n + extra, dag.source, dag.sink);
    b.rewards[..n].clone_from_slice(&dag.rewards);
    b.virtual_states[..n].clone_from_slice(&dag.virtual_states);
    let mut next = n;
    for (u, v) in dag.edges() {
        let gap = layer[v.index()] - layer[u.index()] - 1;
        let mut prev = u;
        for _ in 0..gap {
            let w = StateId::from(next);
            next += 1;
            b.mark_virtual(w);
            b.edge(prev, w);
            prev = w;
        }
        b.edge(prev, v);
        if v == dag.sink && gap > 0 {
            // the last virtual state now links into the sink and inherits the reward
            b.rewards[prev.index()] = dag.rewards[u.index()];
        }
    }
    let mut out = b.build_unchecked().expect("virtual insertion keeps ids in range");
    out.topo = topological_sort(&out).expect("virtual insertion keeps the graph acyclic");
    out
}

/// Forward policy in log space, aligned with the sorted child list of every state.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    pub log_probs: Vec<Vec<f64>>,
}

impl PolicyTable {
    /// Uniform over children at every non-sink state.
    pub fn uniform(dag: &FlowDag) -> Self {
        let log_probs = (0..dag.n_states())
            .map(|s| {
                let k = dag.children[s].len();
                vec![-(k as f64).ln(); k]
            })
            .collect();
        Self { log_probs }
    }

    pub fn prob(&self, dag: &FlowDag, s: StateId, child: StateId) -> f64 {
        dag.child_index(s, child).map(|i| self.log_probs[s.index()][i].exp()).unwrap_or(0.0)
    }
}

/// Terminating probability of every terminating state under `policy`,
/// obtained by pushing probability mass forward from the source.
pub fn exact_terminal_distribution(dag: &FlowDag, policy: &PolicyTable) -> Result<BTreeMap<StateId, f64>, DagError> {
    if policy.log_probs.len() != dag.n_states() {
        return Err(DagError::PolicyShape(dag.source));
    }
    for s in 0..dag.n_states() {
        let sid = StateId::from(s);
        if sid == dag.sink {
            continue;
        }
        let row = &policy.log_probs[s];
        if row.len() != dag.children[s].len() {
            return Err(DagError::PolicyShape(sid));
        }
        let sum: f64 = row.iter().map(|lp| lp.exp()).sum();
        if (sum - 1.0).abs() > POLICY_NORMALIZATION_TOL {
            return Err(DagError::PolicyNotNormalized { state: sid, sum });
        }
    }
    let mut mass = vec![0.0f64; dag.n_states()];
    mass[dag.source.index()] = 1.0;
    let mut out = BTreeMap::new();
    for &s in dag.topological_order() {
        if s == dag.sink {
            continue;
        }
        let m = mass[s.index()];
        for (i, &c) in dag.children(s).iter().enumerate() {
            let flow = m * policy.log_probs[s.index()][i].exp();
            if c == dag.sink {
                out.insert(s, flow);
            } else {
                mass[c.index()] += flow;
            }
        }
    }
    Ok(out)
}

/// Probability of visiting every state under `policy` (the state flow for Z = 1).
pub fn state_visit_probabilities(dag: &FlowDag, policy: &PolicyTable) -> Vec<f64> {
    let mut mass = vec![0.0f64; dag.n_states()];
    mass[dag.source.index()] = 1.0;
    for &s in dag.topological_order() {
        if s == dag.sink {
            continue;
        }
        let m = mass[s.index()];
        for (i, &c) in dag.children(s).iter().enumerate() {
            mass[c.index()] += m * policy.log_probs[s.index()][i].exp();
        }
    }
    mass
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// source(0) -> a(1) -> sink(2)
    pub fn chain(reward: f64) -> FlowDag {
        let mut b = FlowDagBuilder::new(3, StateId(0), StateId(2));
        b.edge(0usize, 1usize).edge(1usize, 2usize).reward(1usize, reward);
        b.build().unwrap()
    }

    /// source(0) -> {a(1), b(2)} -> sink(3), both arms terminating.
    pub fn fork(ra: f64, rb: f64) -> FlowDag {
        let mut b = FlowDagBuilder::new(4, StateId(0), StateId(3));
        b.edge(0usize, 1usize)
            .edge(0usize, 2usize)
            .edge(1usize, 3usize)
            .edge(2usize, 3usize)
            .reward(1usize, ra)
            .reward(2usize, rb);
        b.build().unwrap()
    }

    /// source(0) -> {a(1), b(2)} -> c(3) -> sink(4)
    pub fn diamond() -> FlowDag {
        let mut b = FlowDagBuilder::new(5, StateId(0), StateId(4));
        b.edge(0usize, 1usize)
            .edge(0usize, 2usize)
            .edge(1usize, 3usize)
            .edge(2usize, 3usize)
            .edge(3usize, 4usize)
            .reward(3usize, 1.0);
        b.build().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn minimal_chain_is_valid() {
        let dag = chain(1.0);
        assert_eq!(dag.terminating_states(), vec![StateId(1)]);
        assert_eq!(dag.topological_order().len(), 3);
    }

    #[test]
    fn validation_errors() {
        let mut b = FlowDagBuilder::new(3, StateId(0), StateId(2));
        b.edge(0usize, 1usize).edge(1usize, 0usize).edge(1usize, 2usize).reward(1usize, 1.0);
        assert!(matches!(b.build(), Err(DagError::CycleDetected(_))));

        let mut b = FlowDagBuilder::new(3, StateId(0), StateId(2));
        b.edge(0usize, 1usize).edge(1usize, 2usize).reward(1usize, 0.0);
        assert_eq!(b.build().unwrap_err(), DagError::AllRewardsZero);

        let mut b = FlowDagBuilder::new(3, StateId(0), StateId(2));
        b.edge(0usize, 1usize).edge(1usize, 2usize).reward(1usize, -1.0);
        assert!(matches!(b.build(), Err(DagError::NegativeReward(_, _))));

        let mut b = FlowDagBuilder::new(4, StateId(0), StateId(2));
        b.edge(0usize, 1usize).edge(1usize, 2usize).edge(3usize, 2usize).reward(1usize, 1.0).reward(3usize, 1.0);
        assert_eq!(b.build().unwrap_err(), DagError::UnreachableState(StateId(3)));

        let mut b = FlowDagBuilder::new(4, StateId(0), StateId(2));
        b.edge(0usize, 1usize).edge(1usize, 2usize).edge(0usize, 3usize).reward(1usize, 1.0);
        assert_eq!(b.build().unwrap_err(), DagError::SinkNotReachable(StateId(3)));
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_complete_trajectories(&chain(1.0), 10).unwrap().len(), 1);
        let d = diamond();
        let trajs = enumerate_complete_trajectories(&d, 10).unwrap();
        assert_eq!(trajs.len(), 2);
        assert!(trajs[0] < trajs[1]);
        assert!(matches!(enumerate_complete_trajectories(&d, 1), Err(DagError::TrajectoryBudgetExceeded(1))));
    }

    #[test]
    fn layers_follow_longest_path() {
        let mut b = FlowDagBuilder::new(5, StateId(0), StateId(4));
        // source->a->b->c, source->c
        b.edge(0usize, 1usize)
            .edge(1usize, 2usize)
            .edge(2usize, 3usize)
            .edge(0usize, 3usize)
            .edge(3usize, 4usize)
            .reward(3usize, 1.0);
        let dag = b.build().unwrap();
        assert_eq!(layer_index(&dag), vec![0, 1, 2, 3, 4]);
        assert!(!is_graded(&dag));

        let graded = insert_virtual_states(&dag);
        assert!(is_graded(&graded));
        assert_eq!(graded.n_virtual(), 2);
        assert_eq!(count_complete_trajectories(&graded), count_complete_trajectories(&dag));
    }

    #[test]
    fn single_skip_inserts_one_virtual_state() {
        // source->a->b->sink, a->sink skips from layer 1 to layer 3.
        let mut b = FlowDagBuilder::new(4, StateId(0), StateId(3));
        b.edge(0usize, 1usize)
            .edge(1usize, 2usize)
            .edge(2usize, 3usize)
            .edge(1usize, 3usize)
            .reward(1usize, 1.0)
            .reward(2usize, 1.0);
        let dag = b.build().unwrap();
        let graded = insert_virtual_states(&dag);
        assert_eq!(graded.n_virtual(), 1);
        assert!(graded.is_virtual(StateId(4)));
        assert!(validate_dag(&graded).is_ok());
    }

    #[test]
    fn graded_input_is_unchanged() {
        let d = diamond();
        assert_eq!(insert_virtual_states(&d), d);
    }

    #[test]
    fn terminal_distribution_small_cases() {
        let dag = chain(1.0);
        let pt = exact_terminal_distribution(&dag, &PolicyTable::uniform(&dag)).unwrap();
        assert_eq!(pt[&StateId(1)], 1.0);

        let dag = fork(1.0, 1.0);
        let pt = exact_terminal_distribution(&dag, &PolicyTable::uniform(&dag)).unwrap();
        assert!((pt[&StateId(1)] - 0.5).abs() < 1e-15);
        assert!((pt[&StateId(2)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_policy_is_rejected() {
        let dag = fork(1.0, 1.0);
        let mut p = PolicyTable::uniform(&dag);
        p.log_probs[0][0] = 0.0;
        assert!(matches!(exact_terminal_distribution(&dag, &p), Err(DagError::PolicyNotNormalized { .. })));
    }
}
