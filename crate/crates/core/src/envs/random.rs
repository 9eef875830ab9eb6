//! Seeded random graded DAGs for exact verification.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dag::{FlowDag, FlowDagBuilder, StateId};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum RewardLaw {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
}

impl RewardLaw {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            RewardLaw::Uniform { lo, hi } => rng.gen_range(lo..=hi),
            RewardLaw::LogUniform { lo, hi } => rng.gen_range(lo.ln()..=hi.ln()).exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomDagSpec {
    /// Number of layers strictly between source and sink.
    pub layers: usize,
    /// States per layer.
    pub width: usize,
    pub edge_density: f64,
    pub reward_law: RewardLaw,
    /// Also give every non-sink state a reward (forward-looking objectives).
    #[serde(default)]
    pub intermediate_rewards: bool,
}

impl RandomDagSpec {
    pub fn new(layers: usize, width: usize, edge_density: f64) -> Self {
        Self {
            layers,
            width,
            edge_density,
            reward_law: RewardLaw::Uniform { lo: 0.1, hi: 2.0 },
            intermediate_rewards: false,
        }
    }
}

/// Layered DAG: source, `layers` layers of `width` states, sink. Each
/// possible edge between consecutive layers is kept with probability
/// `edge_density`; states left without a parent or child get one drawn
/// uniformly, so the result is graded and valid by construction. Every
/// last-layer state terminates.
pub fn random_graded_dag<R: Rng>(spec: &RandomDagSpec, rng: &mut R) -> FlowDag {
    let (layers, width) = (spec.layers.max(1), spec.width.max(1));
    let n = layers * width + 2;
    let source = StateId(0);
    let sink = StateId::from(n - 1);
    let id = |layer: usize, j: usize| StateId::from(1 + (layer - 1) * width + j);
    let mut b = FlowDagBuilder::new(n, source, sink);
    // source to layer 1 counts as a layer transition with a single parent
    let mut has_parent = vec![false; n];
    let mut has_child = vec![false; n];
    let mut edges = Vec::new();
    for j in 0..width {
        if rng.gen::<f64>() < spec.edge_density {
            edges.push((source, id(1, j)));
        }
    }
    for l in 1..layers {
        for a in 0..width {
            for c in 0..width {
                if rng.gen::<f64>() < spec.edge_density {
                    edges.push((id(l, a), id(l + 1, c)));
                }
            }
        }
    }
    for &(u, v) in &edges {
        has_child[u.index()] = true;
        has_parent[v.index()] = true;
    }
    // repair: every state gets a parent in the previous layer and a child in the next
    for l in 1..=layers {
        for j in 0..width {
            let s = id(l, j);
            if !has_parent[s.index()] {
                let p = if l == 1 { source } else { id(l - 1, rng.gen_range(0..width)) };
                edges.push((p, s));
                has_parent[s.index()] = true;
                has_child[p.index()] = true;
            }
        }
    }
    for l in 1..layers {
        for j in 0..width {
            let s = id(l, j);
            if !has_child[s.index()] {
                let c = id(l + 1, rng.gen_range(0..width));
                edges.push((s, c));
                has_child[s.index()] = true;
            }
        }
    }
    for (u, v) in edges {
        b.edge(u, v);
    }
    for j in 0..width {
        let s = id(layers, j);
        b.edge(s, sink);
        b.reward(s, spec.reward_law.draw(rng));
    }
    if spec.intermediate_rewards {
        b.reward(source, spec.reward_law.draw(rng));
        for l in 1..layers {
            for j in 0..width {
                b.reward(id(l, j), spec.reward_law.draw(rng));
            }
        }
    }
    b.build().expect("random graded DAG is valid by construction")
}

/// Unlayered DAG on `n_states` states (source 0, sink last): each forward
/// pair `i < j` is an edge with probability `edge_density`. With
/// `all_terminating` every non-sink state links to the sink and so carries
/// a reward; otherwise only states left without a child do.
pub fn random_dag<R: Rng>(
    n_states: usize,
    edge_density: f64,
    all_terminating: bool,
    law: RewardLaw,
    rng: &mut R,
) -> FlowDag {
    let n = n_states.max(2);
    let sink = n - 1;
    let mut b = FlowDagBuilder::new(n, StateId(0), StateId::from(sink));
    let mut has_child = vec![false; n];
    for j in 1..sink {
        let mut has_parent = false;
        for (i, hc) in has_child.iter_mut().enumerate().take(j) {
            if rng.gen::<f64>() < edge_density {
                b.edge(i, j);
                *hc = true;
                has_parent = true;
            }
        }
        if !has_parent {
            let i = rng.gen_range(0..j);
            b.edge(i, j);
            has_child[i] = true;
        }
    }
    for (s, &child) in has_child.iter().enumerate().take(sink) {
        if all_terminating || !child {
            b.edge(s, sink);
            b.reward(s, law.draw(rng));
        }
    }
    b.build().expect("random DAG is valid by construction")
}
