//! Line-oriented text serialization:
//!
//! ```text
//! dag <n_states> <n_edges>
//! source <s>
//! sink <s>
//! edge <u> <v>
//! reward <s> <value>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;

use super::{DagError, FlowDag, FlowDagBuilder, StateId};

pub fn write_dag(dag: &FlowDag) -> String {
    let mut out = String::new();
    writeln!(out, "dag {} {}", dag.n_states(), dag.n_edges()).unwrap();
    writeln!(out, "source {}", dag.source()).unwrap();
    writeln!(out, "sink {}", dag.sink()).unwrap();
    for (u, v) in dag.edges() {
        writeln!(out, "edge {u} {v}").unwrap();
    }
    for s in 0..dag.n_states() {
        if let Some(r) = dag.extended_reward(StateId::from(s)) {
            // `{:?}` prints the shortest representation that round-trips.
            writeln!(out, "reward {s} {r:?}").unwrap();
        }
    }
    out
}

fn field<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T, DagError> {
    tok.ok_or_else(|| DagError::Parse { line, msg: format!("missing {what}") })?
        .parse()
        .map_err(|_| DagError::Parse { line, msg: format!("bad {what}") })
}

pub fn parse_dag(text: &str) -> Result<FlowDag, DagError> {
    let mut header: Option<(usize, usize)> = None;
    let mut source = None;
    let mut sink = None;
    let mut edges = Vec::new();
    let mut rewards = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut toks = l.split_whitespace();
        match toks.next() {
            Some("dag") => {
                header = Some((field(toks.next(), line, "state count")?, field(toks.next(), line, "edge count")?))
            }
            Some("source") => source = Some(field::<u32>(toks.next(), line, "source")?),
            Some("sink") => sink = Some(field::<u32>(toks.next(), line, "sink")?),
            Some("edge") => edges
                .push((field::<u32>(toks.next(), line, "edge tail")?, field::<u32>(toks.next(), line, "edge head")?)),
            Some("reward") => rewards.push((
                field::<u32>(toks.next(), line, "reward state")?,
                field::<f64>(toks.next(), line, "reward value")?,
            )),
            Some(other) => return Err(DagError::Parse { line, msg: format!("unknown directive `{other}`") }),
            None => unreachable!(),
        }
        if toks.next().is_some() {
            return Err(DagError::Parse { line, msg: "trailing tokens".into() });
        }
    }
    let missing = |msg: &str| DagError::Parse { line: 0, msg: msg.into() };
    let (n_states, n_edges) = header.ok_or_else(|| missing("missing `dag` header"))?;
    if edges.len() != n_edges {
        return Err(missing("edge count does not match header"));
    }
    let mut b = FlowDagBuilder::new(
        n_states,
        StateId(source.ok_or_else(|| missing("missing source"))?),
        StateId(sink.ok_or_else(|| missing("missing sink"))?),
    );
    for (u, v) in edges {
        b.edge(StateId(u), StateId(v));
    }
    for (s, r) in rewards {
        if s as usize >= n_states {
            return Err(DagError::StateOutOfRange(StateId(s), n_states));
        }
        b.reward(StateId(s), r);
    }
    b.build()
}
