//! Unrolled (full-time) causal DAGs, d-separation queries and the
//! three-condition check for a time-varying conditional instrument.

mod civ;
mod dsep;
mod text;

pub use civ::{check_civ, theorem_conditioning, CivCondition, CivVerdict, Witness};
pub use dsep::path_is_open;
pub use text::{parse_dag, write_dag};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(TimedNode),
    #[error("edge {from} -> {to} points backwards in time")]
    BackwardInTime { from: TimedNode, to: TimedNode },
    #[error("edge {from} -> {to} closes a directed cycle")]
    Cycle { from: TimedNode, to: TimedNode },
    #[error("edge {from} -> {to} does not exist")]
    MissingEdge { from: TimedNode, to: TimedNode },
    #[error("node sets overlap at {0}")]
    Overlap(TimedNode),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("horizon must be at least 2, got {0}")]
    Horizon(u32),
}

/// A variable at a time index, written `name[t]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimedNode {
    pub name: String,
    pub time: u32,
}

impl TimedNode {
    pub fn new(name: impl Into<String>, time: u32) -> Self {
        Self { name: name.into(), time }
    }
}

impl fmt::Display for TimedNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.name, self.time)
    }
}

impl FromStr for TimedNode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let open = s.find('[').ok_or_else(|| format!("expected name[t], got `{s}`"))?;
        if !s.ends_with(']') {
            return Err(format!("expected name[t], got `{s}`"));
        }
        let name = &s[..open];
        if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
            return Err(format!("bad variable name in `{s}`"));
        }
        let time = s[open + 1..s.len() - 1]
            .trim()
            .parse::<u32>()
            .map_err(|_| format!("bad time index in `{s}`"))?;
        Ok(TimedNode::new(name, time))
    }
}

/// Directed acyclic graph over [`TimedNode`]s with no edge pointing back in time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FullTimeDag {
    nodes: Vec<TimedNode>,
    index: HashMap<TimedNode, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl FullTimeDag {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a node if it is not present and returns its index.
    pub fn add_node(&mut self, node: TimedNode) -> usize {
        if let Some(&i) = self.index.get(&node) {
            return i;
        }
        let i = self.nodes.len();
        self.index.insert(node.clone(), i);
        self.nodes.push(node);
        self.parents.push(Vec::new());
        self.children.push(Vec::new());
        i
    }

    /// Adds `from -> to`, creating missing endpoints. Duplicate edges are ignored.
    pub fn add_edge(&mut self, from: TimedNode, to: TimedNode) -> Result<(), GraphError> {
        if from.time > to.time {
            return Err(GraphError::BackwardInTime { from, to });
        }
        let a = self.add_node(from.clone());
        let b = self.add_node(to.clone());
        if self.children[a].contains(&b) {
            return Ok(());
        }
        if a == b || self.reaches(b, a) {
            return Err(GraphError::Cycle { from, to });
        }
        self.children[a].push(b);
        self.parents[b].push(a);
        self.children[a].sort_unstable();
        self.parents[b].sort_unstable();
        Ok(())
    }

    /// Copy of the graph without `from -> to`.
    pub fn remove_edge(&self, from: &TimedNode, to: &TimedNode) -> Result<FullTimeDag, GraphError> {
        let a = self.id(from)?;
        let b = self.id(to)?;
        if !self.children[a].contains(&b) {
            return Err(GraphError::MissingEdge { from: from.clone(), to: to.clone() });
        }
        let mut out = self.clone();
        out.children[a].retain(|&c| c != b);
        out.parents[b].retain(|&p| p != a);
        Ok(out)
    }

    pub fn has_edge(&self, from: &TimedNode, to: &TimedNode) -> bool {
        match (self.index.get(from), self.index.get(to)) {
            (Some(&a), Some(&b)) => self.children[a].contains(&b),
            _ => false,
        }
    }

    pub fn contains(&self, node: &TimedNode) -> bool {
        self.index.contains_key(node)
    }

    pub fn id(&self, node: &TimedNode) -> Result<usize, GraphError> {
        self.index.get(node).copied().ok_or_else(|| GraphError::UnknownNode(node.clone()))
    }

    pub fn node(&self, id: usize) -> &TimedNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TimedNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn parents_of(&self, id: usize) -> &[usize] {
        &self.parents[id]
    }

    pub fn children_of(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    /// All edges as node pairs, ordered by (source index, target index).
    pub fn edges(&self) -> Vec<(TimedNode, TimedNode)> {
        let mut out = Vec::new();
        for (a, ch) in self.children.iter().enumerate() {
            for &b in ch {
                out.push((self.nodes[a].clone(), self.nodes[b].clone()));
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    /// Largest time index present.
    pub fn horizon(&self) -> u32 {
        self.nodes.iter().map(|n| n.time).max().unwrap_or(0)
    }

    fn reaches(&self, from: usize, to: usize) -> bool {
        let mut stack = vec![from];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(v) = stack.pop() {
            if v == to {
                return true;
            }
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            stack.extend(self.children[v].iter().copied());
        }
        false
    }

    /// Strict descendants of `id`.
    pub fn descendants(&self, id: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<usize> = self.children[id].clone();
        while let Some(v) = stack.pop() {
            if out.insert(v) {
                stack.extend(self.children[v].iter().copied());
            }
        }
        out
    }

    /// Directed path `from -> ... -> to` if one exists.
    pub fn directed_path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let mut prev = vec![usize::MAX; self.nodes.len()];
        let mut queue = std::collections::VecDeque::from([from]);
        prev[from] = from;
        while let Some(v) = queue.pop_front() {
            if v == to {
                let mut path = vec![to];
                let mut cur = to;
                while cur != from {
                    cur = prev[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            for &c in &self.children[v] {
                if prev[c] == usize::MAX {
                    prev[c] = v;
                    queue.push_back(c);
                }
            }
        }
        None
    }

    pub fn d_separated(
        &self,
        a: &[TimedNode],
        b: &[TimedNode],
        given: &[TimedNode],
    ) -> Result<bool, GraphError> {
        dsep::d_separated(self, a, b, given)
    }

    /// An open path between some member of `a` and some member of `b`, if any.
    pub fn open_path(
        &self,
        a: &[TimedNode],
        b: &[TimedNode],
        given: &[TimedNode],
    ) -> Result<Option<Vec<TimedNode>>, GraphError> {
        dsep::open_path(self, a, b, given)
    }
}

/// Variable names used by [`build_paper_dag`].
pub mod names {
    pub const X: &str = "X";
    pub const U: &str = "U";
    pub const S: &str = "S";
    pub const Z: &str = "Z";
    pub const W: &str = "W";
    pub const Y: &str = "Y";
}

/// Unrolls the CIV causal structure over steps `1..=horizon`.
///
/// Per step `t`: `S_t -> W_t`, `Z_t -> W_t`, `Z_t -> Y_{t+1}`, `X_t -> Z_t`,
/// `U_t -> W_t`, `U_t -> Y_{t+1}`, `W_t -> Y_{t+1}`. Across steps each variable
/// feeds its own next state, and `W_t` feeds the next state of every
/// variable. The outcome `Y_{t+1}` only feeds `Y_{t+2}`. With `with_proxy`
/// the measured covariates carry a proxy of the instrument: `S_t -> X_t`.
pub fn build_paper_dag(horizon: u32, with_proxy: bool) -> Result<FullTimeDag, GraphError> {
    use names::*;
    if horizon < 2 {
        return Err(GraphError::Horizon(horizon));
    }
    let n = |name: &str, t: u32| TimedNode::new(name, t);
    let mut g = FullTimeDag::new();
    for t in 1..=horizon {
        for v in [X, U, S, Z, W] {
            g.add_node(n(v, t));
        }
        g.add_node(n(Y, t + 1));
    }
    for t in 1..=horizon {
        g.add_edge(n(S, t), n(W, t))?;
        g.add_edge(n(Z, t), n(W, t))?;
        g.add_edge(n(Z, t), n(Y, t + 1))?;
        g.add_edge(n(X, t), n(Z, t))?;
        g.add_edge(n(U, t), n(W, t))?;
        g.add_edge(n(U, t), n(Y, t + 1))?;
        g.add_edge(n(W, t), n(Y, t + 1))?;
        if with_proxy {
            g.add_edge(n(S, t), n(X, t))?;
        }
        if t < horizon {
            for v in [X, U, S, Z, W] {
                g.add_edge(n(v, t), n(v, t + 1))?;
            }
            g.add_edge(n(Y, t + 1), n(Y, t + 2))?;
            for v in [X, U, S, Z] {
                g.add_edge(n(W, t), n(v, t + 1))?;
            }
            g.add_edge(n(W, t), n(Y, t + 2))?;
        }
    }
    Ok(g)
}
