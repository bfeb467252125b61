use super::{build_schema, compose_metapath, HetGraph, MetapathAdjacency, NodeTypeId};
use crate::error::Result;

/// Per-target-node neighbor lists for the type view and the metapath
/// view. Lists are sorted, deduplicated, and never contain the node
/// itself; aggregation appends self.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    num_targets: usize,
    adjacent_types: Vec<NodeTypeId>,
    /// `[m][i]`: neighbors of target `i` among nodes of `adjacent_types[m]`.
    type_neighbors: Vec<Vec<Vec<usize>>>,
    metapath_names: Vec<String>,
    /// `[n][i]`: target-type neighbors of `i` under metapath `n`.
    metapath_neighbors: Vec<Vec<Vec<usize>>>,
}

impl NeighborIndex {
    /// Both views; one metapath view per metapath declared on the graph.
    pub fn build(graph: &HetGraph) -> Result<NeighborIndex> {
        let mut idx = index_type_neighbors(graph)?;
        for mp in graph.metapaths() {
            idx.add_metapath(compose_metapath(graph, mp)?);
        }
        Ok(idx)
    }

    pub fn add_metapath(&mut self, adj: MetapathAdjacency) {
        assert_eq!(
            adj.num_nodes(),
            self.num_targets,
            "metapath adjacency over a different target set"
        );
        self.metapath_names.push(adj.name.clone());
        self.metapath_neighbors.push(adj.into_rows());
    }

    pub fn num_targets(&self) -> usize {
        self.num_targets
    }

    pub fn adjacent_types(&self) -> &[NodeTypeId] {
        &self.adjacent_types
    }

    pub fn type_neighbors(&self, m: usize, i: usize) -> &[usize] {
        &self.type_neighbors[m][i]
    }

    pub fn type_view(&self, m: usize) -> &[Vec<usize>] {
        &self.type_neighbors[m]
    }

    pub fn metapath_names(&self) -> &[String] {
        &self.metapath_names
    }

    pub fn metapath_neighbors(&self, n: usize, i: usize) -> &[usize] {
        &self.metapath_neighbors[n][i]
    }

    pub fn metapath_view(&self, n: usize) -> &[Vec<usize>] {
        &self.metapath_neighbors[n]
    }
}

/// Type view only: for every schema-adjacent type, the nodes of that type
/// sharing an edge (of any relation, either direction) with each target.
pub fn index_type_neighbors(graph: &HetGraph) -> Result<NeighborIndex> {
    let schema = build_schema(graph)?;
    let t = graph.target();
    let n = graph.num_targets();
    let adjacent_types = schema.adjacent_types(t);
    let mut type_neighbors = Vec::with_capacity(adjacent_types.len());
    for &a in &adjacent_types {
        let mut lists = vec![Vec::new(); n];
        for (e, et) in graph.edge_types().iter().enumerate() {
            let e = super::EdgeTypeId(e);
            if et.src == t && et.dst == a {
                for &(s, d) in graph.edges(e) {
                    lists[s].push(d);
                }
            }
            if et.dst == t && et.src == a {
                for &(s, d) in graph.edges(e) {
                    lists[d].push(s);
                }
            }
        }
        for (i, l) in lists.iter_mut().enumerate() {
            l.sort_unstable();
            l.dedup();
            if a == t {
                l.retain(|&j| j != i);
            }
        }
        type_neighbors.push(lists);
    }
    Ok(NeighborIndex {
        num_targets: n,
        adjacent_types,
        type_neighbors,
        metapath_names: Vec::new(),
        metapath_neighbors: Vec::new(),
    })
}
