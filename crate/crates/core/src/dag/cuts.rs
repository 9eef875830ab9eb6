use super::{enumerate_complete_trajectories, DagError, FlowDag, StateId, Trajectory};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum CutKind {
    StateLayer,
    EdgeLayer,
    PartialTrajectoryLayer,
    CompleteTrajectory,
}

/// A set of (possibly partial) trajectories that every complete trajectory passes through.
#[derive(Clone, Debug, PartialEq)]
pub struct Cut {
    pub kind: CutKind,
    pub members: Vec<Trajectory>,
}

impl Cut {
    /// Checks the cut property by enumerating complete trajectories.
    pub fn covers(&self, dag: &FlowDag, cap: usize) -> Result<bool, DagError> {
        let all = enumerate_complete_trajectories(dag, cap)?;
        Ok(all.iter().all(|tau| self.members.iter().any(|m| tau.contains(m))))
    }
}

/// `V^i`: every state in layer `i`, each as a length-1 trajectory.
pub fn state_layer_cut(dag: &FlowDag, layers: &[usize], i: usize) -> Cut {
    let members =
        (0..dag.n_states()).filter(|&s| layers[s] == i).map(|s| Trajectory::new(vec![StateId::from(s)])).collect();
    Cut { kind: CutKind::StateLayer, members }
}

/// `E^i`: every edge leaving layer `i`.
pub fn edge_layer_cut(dag: &FlowDag, layers: &[usize], i: usize) -> Cut {
    let members =
        dag.edges().filter(|(u, _)| layers[u.index()] == i).map(|(u, v)| Trajectory::new(vec![u, v])).collect();
    Cut { kind: CutKind::EdgeLayer, members }
}

/// `T^{i:j}`: every path that starts in layer `i` and ends in layer `j`.
pub fn partial_trajectory_cut(
    dag: &FlowDag,
    layers: &[usize],
    i: usize,
    j: usize,
    cap: usize,
) -> Result<Cut, DagError> {
    let mut members = Vec::new();
    for s in (0..dag.n_states()).filter(|&s| layers[s] == i) {
        let mut stack: Vec<(Vec<StateId>, usize)> = vec![(vec![StateId::from(s)], 0)];
        while let Some((path, _)) = stack.pop() {
            let last = *path.last().unwrap();
            let l = layers[last.index()];
            if l == j {
                members.push(Trajectory::new(path));
                if members.len() > cap {
                    return Err(DagError::TrajectoryBudgetExceeded(cap));
                }
                continue;
            }
            if l > j {
                continue;
            }
            for &c in dag.children(last).iter().rev() {
                let mut next = path.clone();
                next.push(c);
                stack.push((next, 0));
            }
        }
    }
    members.sort();
    Ok(Cut { kind: CutKind::PartialTrajectoryLayer, members })
}

pub fn complete_trajectory_cut(dag: &FlowDag, cap: usize) -> Result<Cut, DagError> {
    Ok(Cut { kind: CutKind::CompleteTrajectory, members: enumerate_complete_trajectories(dag, cap)? })
}
