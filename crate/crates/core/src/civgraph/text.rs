//! Line-oriented graph format: one `name[t] -> name[t']` edge per line, or a
//! lone `name[t]` for an isolated node. `#` starts a comment.

use std::fmt::Write as _;

use super::{FullTimeDag, GraphError, TimedNode};

pub fn parse_dag(text: &str) -> Result<FullTimeDag, GraphError> {
    let mut g = FullTimeDag::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let parse = |s: &str| s.parse::<TimedNode>().map_err(|message| GraphError::Parse { line, message });
        match content.split_once("->") {
            Some((lhs, rhs)) => {
                let from = parse(lhs)?;
                let to = parse(rhs)?;
                g.add_edge(from, to).map_err(|e| GraphError::Parse { line, message: e.to_string() })?;
            }
            None => {
                g.add_node(parse(content)?);
            }
        }
    }
    Ok(g)
}

/// Inverse of [`parse_dag`]. Isolated nodes are written on their own line.
pub fn write_dag(g: &FullTimeDag) -> String {
    let mut out = String::new();
    for (i, node) in g.nodes().iter().enumerate() {
        if g.parents_of(i).is_empty() && g.children_of(i).is_empty() {
            let _ = writeln!(out, "{node}");
        }
    }
    for (a, b) in g.edges() {
        let _ = writeln!(out, "{a} -> {b}");
    }
    out
}
