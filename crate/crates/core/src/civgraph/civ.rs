use serde::{Deserialize, Serialize};

use super::{names, FullTimeDag, GraphError, TimedNode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CivCondition {
    Relevance,
    Exclusion,
    NonDescendant,
}

/// Evidence for the first failing condition.
///
/// * exclusion: an open path from the instrument to the outcome in the graph
///   without the treatment edge;
/// * non-descendant: a directed path from the outcome into the conditioning set;
/// * relevance: the instrument and treatment, which no open path joins.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub condition: CivCondition,
    pub path: Vec<TimedNode>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CivVerdict {
    pub relevance: bool,
    pub exclusion: bool,
    pub non_descendant: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub witness: Option<Witness>,
}

impl CivVerdict {
    pub fn holds(&self) -> bool {
        self.relevance && self.exclusion && self.non_descendant
    }

    pub fn witness_path(&self) -> Option<&[TimedNode]> {
        self.witness.as_ref().map(|w| w.path.as_slice())
    }
}

/// Checks whether `s` is a conditional instrument for the effect of `w` on
/// `y` given `given`.
pub fn check_civ(
    g: &FullTimeDag,
    s: &TimedNode,
    w: &TimedNode,
    y: &TimedNode,
    given: &[TimedNode],
) -> Result<CivVerdict, GraphError> {
    for node in [s, w, y] {
        g.id(node)?;
        if given.contains(node) {
            return Err(GraphError::Overlap(node.clone()));
        }
    }

    let relevance = !g.d_separated(std::slice::from_ref(s), std::slice::from_ref(w), given)?;

    let manipulated = g.remove_edge(w, y)?;
    let exclusion_path = manipulated.open_path(std::slice::from_ref(s), std::slice::from_ref(y), given)?;
    let exclusion = exclusion_path.is_none();

    let y_id = g.id(y)?;
    let below = g.descendants(y_id);
    let mut descendant_path = None;
    for c in given {
        let c_id = g.id(c)?;
        if below.contains(&c_id) {
            let path = g.directed_path(y_id, c_id).expect("descendant has a directed path");
            descendant_path = Some(path.into_iter().map(|i| g.node(i).clone()).collect::<Vec<_>>());
            break;
        }
    }
    let non_descendant = descendant_path.is_none();

    let witness = if let Some(path) = exclusion_path {
        Some(Witness { condition: CivCondition::Exclusion, path })
    } else if let Some(path) = descendant_path {
        Some(Witness { condition: CivCondition::NonDescendant, path })
    } else if !relevance {
        Some(Witness { condition: CivCondition::Relevance, path: vec![s.clone(), w.clone()] })
    } else {
        None
    };

    Ok(CivVerdict { relevance, exclusion, non_descendant, witness })
}

/// Conditioning set that makes `S_t` an instrument for `W_t -> Y_{t+1}` in
/// the unrolled graph: `Z_1..Z_t`, `S_1..S_{t-1}`, `W_1..W_{t-1}`, `Y_2..Y_t`.
pub fn theorem_conditioning(t: u32) -> Vec<TimedNode> {
    let mut out = Vec::new();
    for i in 1..=t {
        out.push(TimedNode::new(names::Z, i));
    }
    for i in 1..t {
        out.push(TimedNode::new(names::S, i));
        out.push(TimedNode::new(names::W, i));
    }
    for i in 2..=t {
        out.push(TimedNode::new(names::Y, i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{build_paper_dag, path_is_open};
    use super::*;

    fn n(s: &str) -> TimedNode {
        s.parse().unwrap()
    }

    #[test]
    fn instrument_at_step_three_of_four() {
        let g = build_paper_dag(4, true).unwrap();
        let v = check_civ(&g, &n("S[3]"), &n("W[3]"), &n("Y[4]"), &theorem_conditioning(3)).unwrap();
        assert!(v.holds(), "{v:?}");
        assert!(v.witness.is_none());
    }

    #[test]
    fn dropping_current_z_opens_proxy_path() {
        let g = build_paper_dag(4, true).unwrap();
        let given: Vec<TimedNode> = theorem_conditioning(3).into_iter().filter(|x| *x != n("Z[3]")).collect();
        let v = check_civ(&g, &n("S[3]"), &n("W[3]"), &n("Y[4]"), &given).unwrap();
        assert!(v.relevance && !v.exclusion && v.non_descendant);
        let w = v.witness.unwrap();
        assert_eq!(w.condition, CivCondition::Exclusion);
        assert_eq!(w.path, vec![n("S[3]"), n("X[3]"), n("Z[3]"), n("Y[4]")]);
        let h = g.remove_edge(&n("W[3]"), &n("Y[4]")).unwrap();
        assert!(path_is_open(&h, &w.path, &given).unwrap());
    }

    #[test]
    fn confounder_is_never_an_instrument() {
        let g = build_paper_dag(4, true).unwrap();
        let v = check_civ(&g, &n("U[3]"), &n("W[3]"), &n("Y[4]"), &theorem_conditioning(3)).unwrap();
        assert!(!v.exclusion);
        assert_eq!(v.witness.unwrap().path, vec![n("U[3]"), n("Y[4]")]);
    }

    #[test]
    fn conditioning_on_a_later_outcome_breaks_non_descendance() {
        let g = build_paper_dag(4, false).unwrap();
        let mut given = theorem_conditioning(3);
        given.push(n("Y[5]"));
        let v = check_civ(&g, &n("S[3]"), &n("W[3]"), &n("Y[4]"), &given).unwrap();
        assert!(!v.non_descendant);
    }

    #[test]
    fn endpoint_in_conditioning_set_is_rejected() {
        let g = build_paper_dag(3, false).unwrap();
        let given = vec![n("S[2]")];
        assert!(check_civ(&g, &n("S[2]"), &n("W[2]"), &n("Y[3]"), &given).is_err());
    }

    #[test]
    fn verdict_json_round_trip() {
        let g = build_paper_dag(3, true).unwrap();
        let v = check_civ(&g, &n("U[2]"), &n("W[2]"), &n("Y[3]"), &theorem_conditioning(2)).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<CivVerdict>(&s).unwrap(), v);
    }
}
