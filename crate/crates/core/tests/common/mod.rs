//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdciv::civgraph::{FullTimeDag, TimedNode};
use tdciv::diffmath::{DiffError, Tape, Tensor, Var};

/// Number of distinct composition steps understood by [`compose`].
pub const COMPOSITION_OPS: u8 = 16;

/// Leaves for [`compose`]: `a, b: 2x3`, `r: 1x3`, `m: 3x3`.
pub fn composition_points(seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |r, c, s: f64| Tensor::from_fn(r, c, |_, _| s * rng.gen_range(-1.0..1.0));
    vec![t(2, 3, 1.0), t(2, 3, 1.0), t(1, 3, 1.0), t(3, 3, 0.5)]
}

/// Applies `ops` to the running `2x3` value (starting at `a`) and reduces it
/// to a scalar with `reduce`.
pub fn compose(tape: &mut Tape, v: &[Var], ops: &[u8], reduce: u8) -> Result<Var, DiffError> {
    let (a, b, r, m) = (v[0], v[1], v[2], v[3]);
    let mut x = a;
    for &op in ops {
        x = match op % COMPOSITION_OPS {
            0 => tape.sigmoid(x),
            1 => tape.tanh(x),
            2 => {
                let s = tape.square(x);
                tape.scale(s, 0.3)
            }
            3 => {
                let t = tape.tanh(x);
                tape.exp(t)?
            }
            4 => tape.softplus(x),
            5 => {
                let s = tape.square(x);
                let p = tape.add_scalar(s, 0.5);
                tape.log(p)?
            }
            6 => tape.mul(x, b)?,
            7 => tape.add(x, b)?,
            8 => tape.sub(b, x)?,
            9 => tape.add_row(x, r)?,
            10 => tape.mul_row(x, r)?,
            11 => {
                let y = tape.matmul(x, m)?;
                tape.tanh(y)
            }
            12 => tape.affine(x, m, r)?,
            13 => {
                let c = tape.concat_cols(&[b, x])?;
                tape.slice_cols(c, 2, 5)?
            }
            14 => tape.neg(x),
            _ => tape.add_scalar(x, 0.7),
        };
    }
    Ok(match reduce % 3 {
        0 => tape.sum(x),
        1 => tape.mean(x)?,
        _ => {
            let rows = tape.sum_cols(x);
            let sq = tape.square(rows);
            tape.sum(sq)
        }
    })
}

/// Exhaustive d-separation by enumerating simple paths of the skeleton.
/// Independent of the library's reachability search; prefixes that are
/// already blocked are pruned, which keeps the search exhaustive over open
/// paths.
pub struct PathOracle<'g> {
    g: &'g FullTimeDag,
    adj: Vec<BTreeSet<usize>>,
    edges: BTreeSet<(usize, usize)>,
    desc: Vec<BTreeSet<usize>>,
}

impl<'g> PathOracle<'g> {
    pub fn new(g: &'g FullTimeDag) -> Self {
        let mut adj = vec![BTreeSet::new(); g.node_count()];
        let mut edges = BTreeSet::new();
        let index: BTreeMap<&TimedNode, usize> = g.nodes().iter().enumerate().map(|(i, n)| (n, i)).collect();
        for (a, b) in g.edges() {
            let (i, j) = (index[&a], index[&b]);
            adj[i].insert(j);
            adj[j].insert(i);
            edges.insert((i, j));
        }
        let mut o = Self { g, adj, edges, desc: Vec::new() };
        o.desc = (0..g.node_count()).map(|i| o.descendants(i)).collect();
        o
    }

    fn idx(&self, n: &TimedNode) -> usize {
        self.g.nodes().iter().position(|x| x == n).expect("node in graph")
    }

    /// Nodes reachable from `i` by directed edges, including `i`.
    pub fn descendants(&self, i: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([i]);
        let mut stack = vec![i];
        while let Some(u) = stack.pop() {
            for &(a, b) in &self.edges {
                if a == u && seen.insert(b) {
                    stack.push(b);
                }
            }
        }
        seen
    }

    fn triple_open(&self, a: usize, b: usize, c: usize, z: &BTreeSet<usize>) -> bool {
        let collider = self.edges.contains(&(a, b)) && self.edges.contains(&(c, b));
        if collider {
            self.desc[b].iter().any(|d| z.contains(d))
        } else {
            !z.contains(&b)
        }
    }

    /// Every simple path from `from` to `to` that is open given `given`.
    pub fn open_paths(&self, from: &TimedNode, to: &TimedNode, given: &[TimedNode]) -> Vec<Vec<TimedNode>> {
        let z: BTreeSet<usize> = given.iter().map(|n| self.idx(n)).collect();
        let (s, t) = (self.idx(from), self.idx(to));
        let mut out = Vec::new();
        let mut path = vec![s];
        self.extend(&mut path, t, &z, &mut out);
        out.into_iter().map(|p| p.into_iter().map(|i| self.g.node(i).clone()).collect()).collect()
    }

    fn extend(&self, path: &mut Vec<usize>, target: usize, z: &BTreeSet<usize>, out: &mut Vec<Vec<usize>>) {
        let last = *path.last().unwrap();
        if last == target {
            out.push(path.clone());
            return;
        }
        for &next in &self.adj[last] {
            if path.contains(&next) {
                continue;
            }
            if path.len() >= 2 && !self.triple_open(path[path.len() - 2], last, next, z) {
                continue;
            }
            path.push(next);
            self.extend(path, target, z, out);
            path.pop();
        }
    }

    pub fn d_separated(&self, from: &TimedNode, to: &TimedNode, given: &[TimedNode]) -> bool {
        self.open_paths(from, to, given).is_empty()
    }

    /// `(relevance, exclusion, non_descendant)` for instrument `s`,
    /// treatment `w`, outcome `y` given `given`.
    pub fn civ(g: &FullTimeDag, s: &TimedNode, w: &TimedNode, y: &TimedNode, given: &[TimedNode]) -> (bool, bool, bool) {
        let full = PathOracle::new(g);
        let relevance = !full.d_separated(s, w, given);
        let cut = g.remove_edge(w, y).expect("treatment edge present");
        let exclusion = PathOracle::new(&cut).d_separated(s, y, given);
        let below = full.descendants(full.idx(y));
        let non_descendant = given.iter().all(|c| !below.contains(&full.idx(c)));
        (relevance, exclusion, non_descendant)
    }
}

/// Independent openness check of a single path.
pub fn oracle_path_open(g: &FullTimeDag, path: &[TimedNode], given: &[TimedNode]) -> bool {
    let o = PathOracle::new(g);
    let ids: Vec<usize> = path.iter().map(|n| o.idx(n)).collect();
    let z: BTreeSet<usize> = given.iter().map(|n| o.idx(n)).collect();
    let distinct: BTreeSet<usize> = ids.iter().copied().collect();
    if distinct.len() != ids.len() {
        return false;
    }
    ids.windows(2).all(|w| o.adj[w[0]].contains(&w[1])) && ids.windows(3).all(|w| o.triple_open(w[0], w[1], w[2], &z))
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut c = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        c += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    c / (va * vb).sqrt()
}
