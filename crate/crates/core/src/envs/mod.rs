//! Benchmark environments as flow networks with action layouts and state
//! features for the policy networks.

pub mod bitseq;
pub mod hypergrid;
pub mod random;

pub use bitseq::{
    bitseq_children, bitseq_parents, bitseq_reward, build_bitseq, generate_targets, hamming, BitSeqSpec, WordSeq,
};
pub use hypergrid::{build_hypergrid, hypergrid_children, hypergrid_reward, HypergridAction, HypergridSpec};
pub use random::{random_dag, random_graded_dag, RandomDagSpec, RewardLaw};

use thiserror::Error;

use crate::dag::{DagError, FlowDag, StateId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("coordinate {value} at dimension {dim} outside [0, {side})")]
    CoordinateOutOfRange { dim: usize, value: usize, side: usize },
    #[error("sequence has empty words")]
    IncompleteSequence,
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("environment with {0} states is too large to materialize")]
    TooLarge(u128),
    #[error(transparent)]
    Dag(#[from] DagError),
}

/// Maps each edge of a [`FlowDag`] to a fixed output slot of the policy
/// heads. Slot lists are aligned with the sorted child and parent lists.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionLayout {
    pub forward_width: usize,
    pub backward_width: usize,
    forward_slots: Vec<Vec<u32>>,
    backward_slots: Vec<Vec<u32>>,
}

impl ActionLayout {
    /// Slot = position in the sorted child (parent) list.
    pub fn by_index(dag: &FlowDag) -> Self {
        let n = dag.n_states();
        let forward_slots: Vec<Vec<u32>> =
            (0..n).map(|s| (0..dag.children(StateId::from(s)).len() as u32).collect()).collect();
        let backward_slots: Vec<Vec<u32>> = (0..n)
            .map(|s| {
                let sid = StateId::from(s);
                if sid == dag.sink() {
                    Vec::new()
                } else {
                    (0..dag.parents(sid).len() as u32).collect()
                }
            })
            .collect();
        Self::from_slots(forward_slots, backward_slots)
    }

    /// Builds a layout from per-edge slot functions.
    pub fn from_fns(
        dag: &FlowDag,
        forward: impl Fn(StateId, StateId) -> u32,
        backward: impl Fn(StateId, StateId) -> u32,
    ) -> Self {
        let n = dag.n_states();
        let forward_slots = (0..n)
            .map(|s| {
                let s = StateId::from(s);
                dag.children(s).iter().map(|&c| forward(s, c)).collect()
            })
            .collect();
        let backward_slots = (0..n)
            .map(|s| {
                let s = StateId::from(s);
                if s == dag.sink() {
                    Vec::new()
                } else {
                    dag.parents(s).iter().map(|&p| backward(s, p)).collect()
                }
            })
            .collect();
        Self::from_slots(forward_slots, backward_slots)
    }

    fn from_slots(forward_slots: Vec<Vec<u32>>, backward_slots: Vec<Vec<u32>>) -> Self {
        let width = |v: &Vec<Vec<u32>>| v.iter().flat_map(|s| s.iter()).map(|&x| x as usize + 1).max().unwrap_or(0);
        Self {
            forward_width: width(&forward_slots),
            backward_width: width(&backward_slots),
            forward_slots,
            backward_slots,
        }
    }

    /// Slots of the children of `s`, aligned with `dag.children(s)`.
    pub fn forward_slots(&self, s: StateId) -> &[u32] {
        &self.forward_slots[s.index()]
    }

    /// Slots of the parents of `s`, aligned with `dag.parents(s)`; empty for the sink.
    pub fn backward_slots(&self, s: StateId) -> &[u32] {
        &self.backward_slots[s.index()]
    }

    pub fn forward_slot(&self, dag: &FlowDag, s: StateId, child: StateId) -> Option<usize> {
        dag.child_index(s, child).map(|i| self.forward_slots[s.index()][i] as usize)
    }

    pub fn backward_slot(&self, dag: &FlowDag, s: StateId, parent: StateId) -> Option<usize> {
        dag.parent_index(s, parent).and_then(|i| self.backward_slots[s.index()].get(i)).map(|&x| x as usize)
    }

    pub fn forward_mask(&self, s: StateId) -> Vec<bool> {
        let mut m = vec![false; self.forward_width];
        for &x in &self.forward_slots[s.index()] {
            m[x as usize] = true;
        }
        m
    }

    pub fn backward_mask(&self, s: StateId) -> Vec<bool> {
        let mut m = vec![false; self.backward_width];
        for &x in &self.backward_slots[s.index()] {
            m[x as usize] = true;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvKind {
    Hypergrid(HypergridSpec),
    BitSeq(BitSeqSpec),
    Dag,
}

/// A flow network plus everything a policy network needs to act on it.
#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    pub name: String,
    pub kind: EnvKind,
    pub dag: FlowDag,
    pub layout: ActionLayout,
    /// Active one-hot feature indices per state.
    pub features: Vec<Vec<usize>>,
    pub feature_dim: usize,
    /// High-reward regions; a mode is found once any state in it is sampled.
    pub modes: Vec<Vec<StateId>>,
}

impl Env {
    /// Generic wrapper: slots by child/parent position, one-hot state features.
    pub fn from_dag(name: &str, dag: FlowDag) -> Self {
        let layout = ActionLayout::by_index(&dag);
        let n = dag.n_states();
        Self {
            name: name.to_string(),
            kind: EnvKind::Dag,
            layout,
            features: (0..n).map(|s| vec![s]).collect(),
            feature_dim: n,
            modes: Vec::new(),
            dag,
        }
    }

    /// Terminating states ordered by id, with target probabilities `R / sum R`.
    pub fn target_distribution(&self) -> Vec<(StateId, f64)> {
        let total = self.dag.total_reward();
        self.dag.terminating_states().into_iter().map(|s| (s, self.dag.reward(s) / total)).collect()
    }
}
