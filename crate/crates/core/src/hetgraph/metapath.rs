use super::{HetGraph, Metapath};
use crate::error::Result;

/// Boolean relation over target nodes: row `i` lists every `j ≠ i`
/// reachable from `i` by at least one node sequence matching the path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetapathAdjacency {
    pub name: String,
    rows: Vec<Vec<usize>>,
}

impl MetapathAdjacency {
    pub fn from_rows(name: impl Into<String>, rows: Vec<Vec<usize>>) -> Self {
        MetapathAdjacency {
            name: name.into(),
            rows,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.rows.len()
    }

    /// Sorted, deduplicated, self-free neighbors of `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Vec<usize>> {
        self.rows
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    pub fn num_edges(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(i, r)| r.iter().all(|&j| self.contains(j, i)))
    }
}

/// Per-node out-lists of one step, indexed by the step's source type.
fn step_lists(graph: &HetGraph, step: super::MetapathStep) -> Vec<Vec<usize>> {
    let et = &graph.edge_types()[step.edge_type.0];
    let from = if step.reverse { et.dst } else { et.src };
    let n_from = graph.node_types()[from.0].count;
    let mut lists = vec![Vec::new(); n_from];
    for &(s, d) in graph.edges(step.edge_type) {
        if step.reverse {
            lists[d].push(s);
        } else {
            lists[s].push(d);
        }
    }
    lists
}

/// Composes the path's relations as boolean sparse products, pruning to
/// a set after every step.
pub fn compose_metapath(graph: &HetGraph, path: &Metapath) -> Result<MetapathAdjacency> {
    path.validate(graph)?;
    let n = graph.num_targets();
    let steps: Vec<Vec<Vec<usize>>> = path.steps.iter().map(|&s| step_lists(graph, s)).collect();
    let widest = graph.node_types().iter().map(|t| t.count).max().unwrap_or(0);
    let mut mark = vec![usize::MAX; widest];
    let mut rows = Vec::with_capacity(n);
    let mut frontier = Vec::new();
    let mut next = Vec::new();
    for i in 0..n {
        frontier.clear();
        frontier.push(i);
        for (k, lists) in steps.iter().enumerate() {
            next.clear();
            // Stamp unique per (row, step) so the marker array never needs clearing.
            let stamp = i * steps.len() + k;
            for &x in &frontier {
                for &y in &lists[x] {
                    if mark[y] != stamp {
                        mark[y] = stamp;
                        next.push(y);
                    }
                }
            }
            std::mem::swap(&mut frontier, &mut next);
        }
        let mut row: Vec<usize> = frontier.iter().copied().filter(|&j| j != i).collect();
        row.sort_unstable();
        rows.push(row);
    }
    Ok(MetapathAdjacency::from_rows(path.name.clone(), rows))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::error::Error;
    use crate::hetgraph::{EdgeTypeId, HetGraphBuilder, MetapathStep, NodeTypeId};
    use crate::numerics::Tensor;

    fn fwd(e: EdgeTypeId) -> MetapathStep {
        MetapathStep {
            edge_type: e,
            reverse: false,
        }
    }

    fn rev(e: EdgeTypeId) -> MetapathStep {
        MetapathStep {
            edge_type: e,
            reverse: true,
        }
    }

    /// Every concrete node sequence, enumerated depth first.
    fn brute_force(graph: &HetGraph, path: &Metapath) -> Vec<Vec<usize>> {
        fn walk(graph: &HetGraph, steps: &[MetapathStep], at: usize, out: &mut Vec<usize>) {
            let Some((&step, rest)) = steps.split_first() else {
                out.push(at);
                return;
            };
            for &(s, d) in graph.edges(step.edge_type) {
                let (from, to) = if step.reverse { (d, s) } else { (s, d) };
                if from == at {
                    walk(graph, rest, to, out);
                }
            }
        }
        (0..graph.num_targets())
            .map(|i| {
                let mut ends = Vec::new();
                walk(graph, &path.steps, i, &mut ends);
                ends.retain(|&j| j != i);
                ends.sort_unstable();
                ends.dedup();
                ends
            })
            .collect()
    }

    fn pap_graph(edges: &[(usize, usize)], papers: usize, authors: usize) -> (HetGraph, Metapath) {
        let mut b = HetGraphBuilder::new();
        let p = b.node_type("paper", Tensor::zeros(papers, 1)).unwrap();
        let a = b.node_type("author", Tensor::zeros(authors, 1)).unwrap();
        let w = b.edge_type("write", p, a).unwrap();
        for &(s, d) in edges {
            b.edge(w, s, d);
        }
        b.target(p);
        let mp = Metapath::new("PAP", vec![fwd(w), rev(w)]);
        b.metapath(mp.clone());
        (b.build().unwrap(), mp)
    }

    #[test]
    fn shared_author_links_two_papers() {
        let (g, mp) = pap_graph(&[(0, 0), (1, 0)], 2, 1);
        let adj = compose_metapath(&g, &mp).unwrap();
        assert_eq!(adj.rows(), &[vec![1], vec![0]]);
    }

    #[test]
    fn no_shared_intermediate_gives_empty_relation() {
        let (g, mp) = pap_graph(&[(0, 0), (1, 1)], 2, 2);
        assert_eq!(compose_metapath(&g, &mp).unwrap().num_edges(), 0);
    }

    #[test]
    fn apa_on_author_target() {
        let mut b = HetGraphBuilder::new();
        let a = b.node_type("author", Tensor::zeros(2, 1)).unwrap();
        let p = b.node_type("paper", Tensor::zeros(1, 1)).unwrap();
        let w = b.edge_type("write", a, p).unwrap();
        b.edge(w, 0, 0).edge(w, 1, 0).target(a);
        let g = b.build().unwrap();
        let mp = Metapath::new("APA", vec![fwd(w), rev(w)]);
        let adj = compose_metapath(&g, &mp).unwrap();
        assert!(adj.contains(0, 1) && adj.contains(1, 0));
        assert_eq!(adj.num_edges(), 2);
    }

    #[test]
    fn incompatible_steps_fail_to_compose() {
        let (g, _) = pap_graph(&[(0, 0)], 1, 1);
        let bad = Metapath::new("PA", vec![fwd(EdgeTypeId(0)), fwd(EdgeTypeId(0))]);
        assert!(matches!(compose_metapath(&g, &bad), Err(Error::Composition(_))));
    }

    /// Three node types with three relations, including a self-relation
    /// on the target, sized from the strategy input.
    fn random_graph(counts: (usize, usize, usize), edges: &[(u8, usize, usize)]) -> HetGraph {
        let (np, na, ns) = counts;
        let mut b = HetGraphBuilder::new();
        let p = b.node_type("p", Tensor::zeros(np, 1)).unwrap();
        let a = b.node_type("a", Tensor::zeros(na, 1)).unwrap();
        let s = b.node_type("s", Tensor::zeros(ns, 1)).unwrap();
        let pa = b.edge_type("pa", p, a).unwrap();
        let sp = b.edge_type("sp", s, p).unwrap();
        let pp = b.edge_type("pp", p, p).unwrap();
        for &(kind, x, y) in edges {
            match kind % 3 {
                0 => b.edge(pa, x % np, y % na),
                1 => b.edge(sp, x % ns, y % np),
                _ => b.edge(pp, x % np, y % np),
            };
        }
        b.target(NodeTypeId(0));
        b.build().unwrap()
    }

    fn paths() -> Vec<Metapath> {
        let (pa, sp, pp) = (EdgeTypeId(0), EdgeTypeId(1), EdgeTypeId(2));
        vec![
            Metapath::new("PAP", vec![fwd(pa), rev(pa)]),
            Metapath::new("PSP", vec![rev(sp), fwd(sp)]),
            Metapath::new("PPP", vec![fwd(pp), fwd(pp)]),
            Metapath::new("PAPSP", vec![fwd(pa), rev(pa), rev(sp), fwd(sp)]),
            Metapath::new("PPAP", vec![fwd(pp), fwd(pa), rev(pa)]),
            Metapath::new("PP~P", vec![fwd(pp), rev(pp)]),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn composition_matches_brute_force(
            np in 1usize..20, na in 1usize..20, ns in 1usize..10,
            edges in prop::collection::vec((0u8..3, 0usize..50, 0usize..50), 0..80),
        ) {
            let g = random_graph((np, na, ns), &edges);
            for mp in paths() {
                let adj = compose_metapath(&g, &mp).unwrap();
                let expected = brute_force(&g, &mp);
                prop_assert_eq!(adj.rows(), expected.as_slice(), "{}", mp.name);
                if mp.is_palindromic() {
                    prop_assert!(adj.is_symmetric(), "{} not symmetric", mp.name);
                }
                for (i, r) in adj.rows().iter().enumerate() {
                    prop_assert!(!r.contains(&i));
                    prop_assert!(r.windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
    }

    #[test]
    fn palindrome_detection() {
        let p = paths();
        let flags: Vec<bool> = p.iter().map(|m| m.is_palindromic()).collect();
        assert_eq!(flags, vec![true, true, false, false, false, true]);
    }
}
