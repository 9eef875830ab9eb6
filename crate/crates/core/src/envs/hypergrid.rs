//! D-dimensional hyper-grid with corner reward modes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ActionLayout, Env, EnvError, EnvKind};
use crate::dag::{FlowDagBuilder, StateId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypergridSpec {
    pub dims: usize,
    pub side: usize,
    #[serde(default = "default_r0")]
    pub r0: f64,
    #[serde(default = "default_r1")]
    pub r1: f64,
    #[serde(default = "default_r2")]
    pub r2: f64,
}

fn default_r0() -> f64 {
    1e-4
}

fn default_r1() -> f64 {
    -9.9e-5
}

fn default_r2() -> f64 {
    1.0 - 1e-6
}

impl HypergridSpec {
    /// Grid with the standard reward constants.
    pub fn new(dims: usize, side: usize) -> Self {
        Self { dims, side, r0: default_r0(), r1: default_r1(), r2: default_r2() }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.dims == 0 || self.side == 0 {
            return Err(EnvError::InvalidSpec("hypergrid needs dims >= 1 and side >= 1".into()));
        }
        if !(0.0 < -self.r1 && -self.r1 < self.r0 && self.r0 < self.r2) {
            return Err(EnvError::InvalidSpec(format!(
                "hypergrid rewards need 0 < -r1 < r0 < r2, got r0={} r1={} r2={}",
                self.r0, self.r1, self.r2
            )));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> u128 {
        (self.side as u128).pow(self.dims as u32)
    }

    pub fn cell_id(&self, x: &[usize]) -> usize {
        x.iter().rev().fold(0, |acc, &xi| acc * self.side + xi)
    }

    pub fn coords(&self, id: usize) -> Vec<usize> {
        let mut id = id;
        (0..self.dims)
            .map(|_| {
                let xi = id % self.side;
                id /= self.side;
                xi
            })
            .collect()
    }

    /// `|2x - H|`; the indicators compare `|x/H - 0.5| = |2x - H| / 2H`
    /// in integers because `4/20 - 0.5` rounds above `0.3` in floating point.
    fn offset(&self, xi: usize) -> usize {
        (2 * xi).abs_diff(self.side)
    }

    /// First indicator: `|x_i/H - 0.5| > 0.25` in every dimension.
    pub fn in_outer_band(&self, x: &[usize]) -> bool {
        x.iter().all(|&xi| 2 * self.offset(xi) > self.side)
    }

    /// Second indicator: `0.3 < |x_i/H - 0.5| < 0.4` in every dimension.
    pub fn in_mode(&self, x: &[usize]) -> bool {
        x.iter().all(|&xi| {
            let d = 10 * self.offset(xi);
            6 * self.side < d && d < 8 * self.side
        })
    }
}

pub fn hypergrid_reward(x: &[usize], spec: &HypergridSpec) -> Result<f64, EnvError> {
    for (dim, &value) in x.iter().enumerate() {
        if value >= spec.side {
            return Err(EnvError::CoordinateOutOfRange { dim, value, side: spec.side });
        }
    }
    let outer = spec.in_outer_band(x);
    let inner = spec.in_mode(x);
    Ok(spec.r0 + if outer { spec.r1 } else { 0.0 } + if inner { spec.r2 } else { 0.0 })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum HypergridAction {
    Increment(usize),
    Stop,
}

/// Increment actions that stay on the grid, then the stop action.
pub fn hypergrid_children(x: &[usize], spec: &HypergridSpec) -> Vec<HypergridAction> {
    let mut out: Vec<_> = (0..spec.dims).filter(|&i| x[i] + 1 < spec.side).map(HypergridAction::Increment).collect();
    out.push(HypergridAction::Stop);
    out
}

/// Materializes the grid: cell ids in mixed radix (dimension 0 fastest),
/// the origin as source, and one extra id for the sink.
pub fn build_hypergrid(spec: &HypergridSpec) -> Result<Env, EnvError> {
    spec.validate()?;
    let cells = spec.n_cells();
    if cells > 5_000_000 {
        return Err(EnvError::TooLarge(cells + 1));
    }
    let cells = cells as usize;
    let sink = StateId::from(cells);
    let mut b = FlowDagBuilder::new(cells + 1, StateId(0), sink);
    let mut features = Vec::with_capacity(cells + 1);
    let mut mode_groups: BTreeMap<Vec<bool>, Vec<StateId>> = BTreeMap::new();
    let mut stride = vec![1usize; spec.dims];
    for i in 1..spec.dims {
        stride[i] = stride[i - 1] * spec.side;
    }
    for id in 0..cells {
        let x = spec.coords(id);
        for i in 0..spec.dims {
            if x[i] + 1 < spec.side {
                b.edge(id, id + stride[i]);
            }
        }
        b.edge(StateId::from(id), sink);
        b.reward(id, hypergrid_reward(&x, spec)?);
        features.push(x.iter().enumerate().map(|(i, &xi)| i * spec.side + xi).collect());
        if spec.in_mode(&x) {
            let corner = x.iter().map(|&xi| 2 * xi < spec.side).collect();
            mode_groups.entry(corner).or_default().push(StateId::from(id));
        }
    }
    features.push(Vec::new());
    let dag = b.build()?;
    let dims = spec.dims as u32;
    let layout = ActionLayout::from_fns(
        &dag,
        |s, c| {
            if c == sink {
                dims
            } else {
                stride.iter().position(|&st| c.index() - s.index() == st).unwrap() as u32
            }
        },
        |s, p| stride.iter().position(|&st| s.index() - p.index() == st).unwrap() as u32,
    );
    Ok(Env {
        name: format!("hypergrid_d{}_h{}", spec.dims, spec.side),
        kind: EnvKind::Hypergrid(spec.clone()),
        dag,
        layout,
        features,
        feature_dim: spec.dims * spec.side,
        modes: mode_groups.into_values().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{count_complete_trajectories, enumerate_complete_trajectories, DEFAULT_TRAJECTORY_CAP};

    #[test]
    fn reward_examples() {
        let spec = HypergridSpec::new(4, 20);
        assert!((hypergrid_reward(&[10, 10, 10, 10], &spec).unwrap() - 1e-4).abs() < 1e-18);
        assert!((hypergrid_reward(&[0, 0, 0, 0], &spec).unwrap() - 1e-6).abs() < 1e-18);
        assert!((hypergrid_reward(&[3, 17, 3, 17], &spec).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(hypergrid_reward(&[20, 0, 0, 0], &spec), Err(EnvError::CoordinateOutOfRange { dim: 0, .. })));
    }

    #[test]
    fn mode_cells_of_the_standard_grid() {
        let spec = HypergridSpec::new(4, 20);
        let mut hits = 0;
        for id in 0..spec.n_cells() as usize {
            let x = spec.coords(id);
            if hypergrid_reward(&x, &spec).unwrap() >= 0.5 {
                hits += 1;
                assert!(x.iter().all(|&xi| xi == 3 || xi == 17), "{x:?}");
            }
        }
        assert_eq!(hits, 16);
    }

    #[test]
    fn children_counts() {
        let spec = HypergridSpec::new(4, 20);
        assert_eq!(hypergrid_children(&[19, 19, 19, 19], &spec), vec![HypergridAction::Stop]);
        assert_eq!(hypergrid_children(&[0, 0, 0, 0], &spec).len(), 5);
    }

    #[test]
    fn rejects_bad_constants() {
        let mut spec = HypergridSpec::new(2, 8);
        spec.r1 = 0.1;
        assert!(matches!(build_hypergrid(&spec), Err(EnvError::InvalidSpec(_))));
    }

    /// Independent recursive path count over coordinates.
    fn paths_from(x: &mut Vec<usize>, side: usize) -> u64 {
        let mut total = 1; // stop here
        for i in 0..x.len() {
            if x[i] + 1 < side {
                x[i] += 1;
                total += paths_from(x, side);
                x[i] -= 1;
            }
        }
        total
    }

    #[test]
    fn materialized_grid_matches_lazy_queries() {
        let spec = HypergridSpec::new(2, 4);
        let env = build_hypergrid(&spec).unwrap();
        let dag = &env.dag;
        assert_eq!(dag.terminating_states().len(), 16);
        for id in 0..16 {
            let s = StateId::from(id);
            let x = spec.coords(id);
            let lazy = hypergrid_children(&x, &spec);
            assert_eq!(dag.children(s).len(), lazy.len());
            for (&c, &slot) in dag.children(s).iter().zip(env.layout.forward_slots(s)) {
                let action =
                    if c == dag.sink() { HypergridAction::Stop } else { HypergridAction::Increment(slot as usize) };
                assert!(lazy.contains(&action));
                if let HypergridAction::Increment(i) = action {
                    let mut y = x.clone();
                    y[i] += 1;
                    assert_eq!(spec.cell_id(&y), c.index());
                }
            }
            assert_eq!(dag.reward(s), hypergrid_reward(&x, &spec).unwrap());
            assert_eq!(env.features[id].len(), 2);
        }
        let small = build_hypergrid(&HypergridSpec::new(2, 2)).unwrap();
        let n = enumerate_complete_trajectories(&small.dag, DEFAULT_TRAJECTORY_CAP).unwrap().len();
        assert_eq!(n as u64, paths_from(&mut vec![0, 0], 2));
        assert_eq!(count_complete_trajectories(&env.dag) as u64, paths_from(&mut vec![0, 0], 4));
    }

    #[test]
    fn desk_grid_has_four_single_cell_modes() {
        let env = build_hypergrid(&HypergridSpec::new(2, 8)).unwrap();
        assert_eq!(env.modes.len(), 4);
        let spec = HypergridSpec::new(2, 8);
        for m in &env.modes {
            assert_eq!(m.len(), 1);
            let x = spec.coords(m[0].index());
            assert!(x.iter().all(|&xi| xi == 1 || xi == 7));
        }
    }
}
