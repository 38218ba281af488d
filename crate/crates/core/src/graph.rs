//! Causal DAG over the protected attribute and the observed features.
//!
//! Node 0 of a validated graph is always the protected attribute `A`; nodes
//! `1..=m` are the features in a topological order. The prediction target is
//! not part of the graph.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unvalidated graph description, as it appears in a run configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub protected: String,
    pub features: Vec<String>,
    /// Edges written as `"parent->child"`.
    pub edges: Vec<String>,
}

impl GraphSpec {
    pub fn new(protected: &str, features: &[&str], edges: &[&str]) -> Self {
        GraphSpec {
            protected: protected.to_string(),
            features: features.iter().map(|s| s.to_string()).collect(),
            edges: edges.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A validated DAG with nodes stored in topological order, protected attribute first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalGraph {
    nodes: Vec<String>,
    parents: Vec<Vec<usize>>,
}

fn parse_edge(edge: &str) -> Result<(String, String)> {
    let mut parts = edge.split("->");
    match (parts.next(), parts.next(), parts.next()) {
        (Some(p), Some(c), None) if !p.trim().is_empty() && !c.trim().is_empty() => {
            Ok((p.trim().to_string(), c.trim().to_string()))
        }
        _ => Err(Error::MalformedEdge(edge.to_string())),
    }
}

/// Checks the graph and computes a topological order with the protected attribute first.
pub fn validate(spec: &GraphSpec) -> Result<CausalGraph> {
    if spec.protected.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let mut names = vec![spec.protected.clone()];
    names.extend(spec.features.iter().cloned());
    let index: HashMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    if index.len() != names.len() {
        let mut seen = BTreeSet::new();
        let dup = names.iter().find(|n| !seen.insert(n.as_str())).unwrap();
        return Err(Error::InvalidConfig(format!("duplicate node `{dup}`")));
    }

    let k = names.len();
    let mut parent_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); k];
    for edge in &spec.edges {
        let (p, c) = parse_edge(edge)?;
        let pi = *index.get(p.as_str()).ok_or(Error::UnknownNodeInEdge(p.clone()))?;
        let ci = *index.get(c.as_str()).ok_or(Error::UnknownNodeInEdge(c.clone()))?;
        if pi == ci {
            return Err(Error::CycleDetected(p));
        }
        parent_sets[ci].insert(pi);
    }
    // Kahn's algorithm; ties resolved by declaration order so the result is stable.
    let mut indegree: Vec<usize> = parent_sets.iter().map(|s| s.len()).collect();
    let mut placed = vec![false; k];
    let mut order = Vec::with_capacity(k);
    while order.len() < k {
        let next = (0..k).find(|&v| !placed[v] && indegree[v] == 0);
        let Some(v) = next else {
            let stuck = (0..k).find(|&v| !placed[v]).unwrap();
            return Err(Error::CycleDetected(names[stuck].clone()));
        };
        placed[v] = true;
        order.push(v);
        for (child, ps) in parent_sets.iter().enumerate() {
            if ps.contains(&v) {
                indegree[child] -= 1;
            }
        }
    }
    if !parent_sets[0].is_empty() {
        return Err(Error::ProtectedHasParents(spec.protected.clone()));
    }
    debug_assert_eq!(order[0], 0);

    let mut position = vec![0; k];
    for (pos, &v) in order.iter().enumerate() {
        position[v] = pos;
    }
    let nodes = order.iter().map(|&v| names[v].clone()).collect();
    let parents = order
        .iter()
        .map(|&v| {
            let mut ps: Vec<usize> = parent_sets[v].iter().map(|&p| position[p]).collect();
            ps.sort_unstable();
            ps
        })
        .collect();
    Ok(CausalGraph { nodes, parents })
}

impl CausalGraph {
    pub fn protected(&self) -> &str {
        &self.nodes[0]
    }

    /// All node names in stored order, protected attribute first.
    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    /// Feature names in topological order.
    pub fn features(&self) -> &[String] {
        &self.nodes[1..]
    }

    pub fn num_features(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node_index(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    /// Parent names of `node`, in stored node order.
    pub fn parents(&self, node: &str) -> Result<Vec<&str>> {
        let i = self.node_index(node)?;
        Ok(self.parents[i].iter().map(|&p| self.nodes[p].as_str()).collect())
    }

    /// Parent node indices of feature `j` (0-based among features). Index 0 is `A`,
    /// index `k >= 1` is feature `k - 1`.
    pub fn feature_parents(&self, j: usize) -> &[usize] {
        &self.parents[j + 1]
    }

    /// Back to the configuration form; `validate(&g.to_spec())` reproduces `g`.
    pub fn to_spec(&self) -> GraphSpec {
        let mut edges = Vec::new();
        for (child, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                edges.push(format!("{}->{}", self.nodes[p], self.nodes[child]));
            }
        }
        GraphSpec {
            protected: self.nodes[0].clone(),
            features: self.nodes[1..].to_vec(),
            edges,
        }
    }

    /// Every edge as `(parent_index, child_index)` in stored order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .flat_map(|(c, ps)| ps.iter().map(move |&p| (p, c)))
            .collect()
    }

    /// Two-feature law school graph `A->G, A->L, G->L`.
    pub fn law_school() -> Self {
        validate(&GraphSpec::new("A", &["G", "L"], &["A->G", "A->L", "G->L"]))
            .expect("static graph is valid")
    }

    /// Three-feature staff survey graph with `O -> M -> J` and `A` feeding all three.
    pub fn nhs() -> Self {
        validate(&GraphSpec::new(
            "A",
            &["O", "M", "J"],
            &["A->O", "A->M", "A->J", "O->M", "O->J", "M->J"],
        ))
        .expect("static graph is valid")
    }
}

/// Split of the features into those whose residuals feed the predictor (unfair
/// paths from `A`) and those passed through as raw values (fair paths).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSpecMask {
    pub unfair_nodes: Vec<String>,
    pub fair_nodes: Vec<String>,
}

impl PathSpecMask {
    /// Returns, per feature in graph order, `true` when the feature is unfair.
    pub fn resolve(&self, graph: &CausalGraph) -> Result<Vec<bool>> {
        let mut unfair = vec![None; graph.num_features()];
        for (names, flag) in [(&self.unfair_nodes, true), (&self.fair_nodes, false)] {
            for name in names {
                let i = graph.node_index(name)?;
                if i == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "protected attribute `{name}` cannot appear in a path mask"
                    )));
                }
                if unfair[i - 1].replace(flag).is_some() {
                    return Err(Error::InvalidConfig(format!(
                        "feature `{name}` listed twice in path mask"
                    )));
                }
            }
        }
        unfair
            .into_iter()
            .enumerate()
            .map(|(j, f)| {
                f.ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "feature `{}` missing from path mask",
                        graph.features()[j]
                    ))
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn law_school_order() {
        let g = validate(&GraphSpec::new("A", &["L", "G"], &["A->G", "A->L", "G->L"])).unwrap();
        assert_eq!(g.nodes(), &["A", "G", "L"]);
        assert_eq!(g.parents("G").unwrap(), vec!["A"]);
        assert_eq!(g.parents("L").unwrap(), vec!["A", "G"]);
        assert!(g.parents("A").unwrap().is_empty());
    }

    #[test]
    fn single_node() {
        let g = validate(&GraphSpec::new("A", &[], &[])).unwrap();
        assert_eq!(g.nodes(), &["A"]);
        assert_eq!(g.num_features(), 0);
    }

    #[test]
    fn two_cycle_rejected() {
        let err = validate(&GraphSpec::new("A", &["G"], &["A->G", "G->A"])).unwrap_err();
        assert!(matches!(err, Error::CycleDetected(_)));
        let err = validate(&GraphSpec::new("A", &["G"], &["G->A"])).unwrap_err();
        assert!(matches!(err, Error::ProtectedHasParents(_)));
        let err = validate(&GraphSpec::new("A", &["G", "L"], &["G->L", "L->G"])).unwrap_err();
        assert!(matches!(err, Error::CycleDetected(_)));
    }

    #[test]
    fn unknown_and_malformed_edges() {
        assert!(matches!(
            validate(&GraphSpec::new("A", &["G"], &["A->Q"])).unwrap_err(),
            Error::UnknownNodeInEdge(n) if n == "Q"
        ));
        assert!(matches!(
            validate(&GraphSpec::new("A", &["G"], &["A-G"])).unwrap_err(),
            Error::MalformedEdge(_)
        ));
        assert!(matches!(
            CausalGraph::law_school().parents("Z").unwrap_err(),
            Error::UnknownNode(_)
        ));
    }

    #[test]
    fn nhs_parents() {
        let g = CausalGraph::nhs();
        assert_eq!(g.parents("J").unwrap(), vec!["A", "O", "M"]);
        assert_eq!(g.feature_parents(2), &[0, 1, 2]);
    }

    #[test]
    fn path_mask_partition() {
        let g = CausalGraph::nhs();
        let mask = PathSpecMask {
            unfair_nodes: vec!["O".into(), "J".into()],
            fair_nodes: vec!["M".into()],
        };
        assert_eq!(mask.resolve(&g).unwrap(), vec![true, false, true]);
        let overlapping = PathSpecMask {
            unfair_nodes: vec!["O".into(), "M".into()],
            fair_nodes: vec!["M".into(), "J".into()],
        };
        assert!(overlapping.resolve(&g).is_err());
        let partial = PathSpecMask {
            unfair_nodes: vec!["O".into()],
            fair_nodes: vec![],
        };
        assert!(partial.resolve(&g).is_err());
    }

    fn random_dag() -> impl Strategy<Value = GraphSpec> {
        (1usize..7).prop_flat_map(|m| {
            let pairs: Vec<(usize, usize)> =
                (0..=m).flat_map(|c| (0..c).map(move |p| (p, c))).collect();
            (
                Just(m),
                proptest::collection::vec(any::<bool>(), pairs.len()),
                Just(pairs),
                Just(()).prop_perturb(move |_, mut rng| {
                    let mut perm: Vec<usize> = (1..=m).collect();
                    for i in (1..perm.len()).rev() {
                        perm.swap(i, rng.random_range(0..=i));
                    }
                    perm
                }),
            )
        })
        .prop_map(|(m, keep, pairs, perm)| {
            let name = |v: usize| if v == 0 { "A".to_string() } else { format!("X{v}") };
            let features = perm.iter().map(|&v| name(v)).collect();
            let _ = m;
            let edges = pairs
                .iter()
                .zip(keep)
                .filter(|(_, k)| *k)
                .map(|((p, c), _)| format!("{}->{}", name(*p), name(*c)))
                .collect();
            GraphSpec {
                protected: "A".into(),
                features,
                edges,
            }
        })
    }

    proptest! {
        #[test]
        fn edges_respect_stored_order(spec in random_dag()) {
            let g = validate(&spec).unwrap();
            prop_assert_eq!(g.nodes()[0].as_str(), "A");
            for (p, c) in g.edges() {
                prop_assert!(p < c);
            }
        }

        #[test]
        fn validate_is_idempotent(spec in random_dag()) {
            let g = validate(&spec).unwrap();
            let again = validate(&g.to_spec()).unwrap();
            prop_assert_eq!(g, again);
        }
    }
}
