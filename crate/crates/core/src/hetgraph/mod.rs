//! Immutable heterogeneous graph: typed nodes with per-type features,
//! typed edges, a target type with optional labels, and metapaths.
//!
//! Node indices are local to their type; a global node is the pair
//! `(NodeTypeId, local index)`.

mod format;
mod metapath;
mod neighbors;

use std::collections::BTreeSet;

pub use format::{graph_fingerprint, parse_graph, read_graph, write_graph};
pub use metapath::{compose_metapath, MetapathAdjacency};
pub use neighbors::{index_type_neighbors, NeighborIndex};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeTypeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeTypeId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct NodeType {
    pub name: String,
    pub count: usize,
    pub feature_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeType {
    pub name: String,
    pub src: NodeTypeId,
    pub dst: NodeTypeId,
}

/// One hop of a metapath. `reverse` walks the edge type dst → src.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetapathStep {
    pub edge_type: EdgeTypeId,
    pub reverse: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Metapath {
    pub name: String,
    pub steps: Vec<MetapathStep>,
}

impl Metapath {
    pub fn new(name: impl Into<String>, steps: Vec<MetapathStep>) -> Self {
        Metapath {
            name: name.into(),
            steps,
        }
    }

    /// Node type a step starts from and the one it lands on.
    fn step_types(graph: &HetGraph, step: MetapathStep) -> (NodeTypeId, NodeTypeId) {
        let et = &graph.edge_types[step.edge_type.0];
        if step.reverse {
            (et.dst, et.src)
        } else {
            (et.src, et.dst)
        }
    }

    /// Checks length, type continuity, and that the path begins and
    /// ends at the target type.
    pub fn validate(&self, graph: &HetGraph) -> Result<()> {
        if self.steps.len() < 2 {
            return Err(Error::Composition(format!(
                "metapath {} has {} step(s), need at least 2",
                self.name,
                self.steps.len()
            )));
        }
        if let Some(bad) = self.steps.iter().find(|s| s.edge_type.0 >= graph.edge_types.len()) {
            return Err(Error::Composition(format!(
                "metapath {} references unknown edge type {}",
                self.name, bad.edge_type.0
            )));
        }
        let (start, _) = Self::step_types(graph, self.steps[0]);
        let mut at = start;
        for (k, &step) in self.steps.iter().enumerate() {
            let (from, to) = Self::step_types(graph, step);
            if from != at {
                return Err(Error::Composition(format!(
                    "metapath {}: step {} leaves {} but the previous step ended at {}",
                    self.name, k, graph.node_types[from.0].name, graph.node_types[at.0].name
                )));
            }
            at = to;
        }
        let target = graph.target;
        if start != target || at != target {
            return Err(Error::Composition(format!(
                "metapath {} must start and end at target type {}",
                self.name, graph.node_types[target.0].name
            )));
        }
        Ok(())
    }

    /// True when step `k` is the reverse of step `n-1-k` for every `k`,
    /// which makes the composed relation symmetric.
    pub fn is_palindromic(&self) -> bool {
        let n = self.steps.len();
        (0..n).all(|k| {
            let (a, b) = (self.steps[k], self.steps[n - 1 - k]);
            a.edge_type == b.edge_type && a.reverse != b.reverse
        })
    }
}

/// Heterogeneous graph. Construct with [`HetGraphBuilder`].
#[derive(Clone, Debug, PartialEq)]
pub struct HetGraph {
    node_types: Vec<NodeType>,
    edge_types: Vec<EdgeType>,
    edges: Vec<Vec<(usize, usize)>>,
    features: Vec<Tensor>,
    target: NodeTypeId,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    metapaths: Vec<Metapath>,
    metadata: Vec<(String, String)>,
}

impl HetGraph {
    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    pub fn edge_types(&self) -> &[EdgeType] {
        &self.edge_types
    }

    pub fn edges(&self, e: EdgeTypeId) -> &[(usize, usize)] {
        &self.edges[e.0]
    }

    pub fn features(&self, t: NodeTypeId) -> &Tensor {
        &self.features[t.0]
    }

    pub fn all_features(&self) -> &[Tensor] {
        &self.features
    }

    pub fn target(&self) -> NodeTypeId {
        self.target
    }

    pub fn num_targets(&self) -> usize {
        self.node_types[self.target.0].count
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn metapaths(&self) -> &[Metapath] {
        &self.metapaths
    }

    pub fn metadata(&self) -> &[(String, String)] {
        &self.metadata
    }

    pub fn total_nodes(&self) -> usize {
        self.node_types.iter().map(|t| t.count).sum()
    }

    /// Row offset of each type when all node types are stacked in id order.
    pub fn type_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.node_types.len());
        let mut acc = 0;
        for t in &self.node_types {
            out.push(acc);
            acc += t.count;
        }
        out
    }

    pub fn node_type_id(&self, name: &str) -> Option<NodeTypeId> {
        self.node_types.iter().position(|t| t.name == name).map(NodeTypeId)
    }

    pub fn edge_type_id(&self, name: &str) -> Option<EdgeTypeId> {
        self.edge_types.iter().position(|t| t.name == name).map(EdgeTypeId)
    }

    /// Copy of this graph with different feature matrices of the same shapes.
    pub fn with_features(&self, features: Vec<Tensor>) -> Result<HetGraph> {
        if features.len() != self.features.len() {
            return Err(Error::validation("feature matrix count differs from node type count"));
        }
        for (t, (old, new)) in self.features.iter().zip(&features).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::validation(format!(
                    "features of {} have shape {:?}, expected {:?}",
                    self.node_types[t].name,
                    new.shape(),
                    old.shape()
                )));
            }
        }
        let mut g = self.clone();
        g.features = features;
        Ok(g)
    }

    /// Copy with node order permuted inside each type: new local index
    /// `perm[t][old]` for node `old` of type `t`.
    pub fn permuted(&self, perm: &[Vec<usize>]) -> Result<HetGraph> {
        let mut b = HetGraphBuilder::new();
        for (t, nt) in self.node_types.iter().enumerate() {
            let f = &self.features[t];
            let mut nf = Tensor::zeros(f.rows(), f.cols());
            for (old, &new) in perm[t].iter().enumerate().take(nt.count) {
                nf.row_mut(new).copy_from_slice(f.row(old));
            }
            b.node_type(&nt.name, nf)?;
        }
        for (e, et) in self.edge_types.iter().enumerate() {
            let id = b.edge_type(&et.name, et.src, et.dst)?;
            for &(s, d) in &self.edges[e] {
                b.edge(id, perm[et.src.0][s], perm[et.dst.0][d]);
            }
        }
        b.target(self.target);
        let tp = &perm[self.target.0];
        for (old, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                b.label(tp[old], *c);
            }
        }
        for mp in &self.metapaths {
            b.metapath(mp.clone());
        }
        b.num_classes(self.num_classes);
        b.build()
    }

    fn validate(&self) -> Result<()> {
        if self.node_types.len() + self.edge_types.len() <= 2 {
            return Err(Error::validation(format!(
                "not heterogeneous: {} node type(s) + {} edge type(s) must exceed 2",
                self.node_types.len(),
                self.edge_types.len()
            )));
        }
        let mut names = BTreeSet::new();
        for t in &self.node_types {
            if !names.insert(&t.name) {
                return Err(Error::validation(format!("duplicate node type name {}", t.name)));
            }
        }
        let mut enames = BTreeSet::new();
        for (e, et) in self.edge_types.iter().enumerate() {
            if !enames.insert(&et.name) {
                return Err(Error::validation(format!("duplicate edge type name {}", et.name)));
            }
            for t in [et.src, et.dst] {
                if t.0 >= self.node_types.len() {
                    return Err(Error::validation(format!(
                        "edge type {} references unknown node type {}",
                        et.name, t.0
                    )));
                }
            }
            let (ns, nd) = (self.node_types[et.src.0].count, self.node_types[et.dst.0].count);
            for &(s, d) in &self.edges[e] {
                if s >= ns || d >= nd {
                    return Err(Error::validation(format!(
                        "edge {} ({s}, {d}) out of range: {} has {ns} nodes, {} has {nd}",
                        et.name, self.node_types[et.src.0].name, self.node_types[et.dst.0].name
                    )));
                }
            }
        }
        for (t, nt) in self.node_types.iter().enumerate() {
            if self.features[t].shape() != (nt.count, nt.feature_dim) {
                return Err(Error::validation(format!(
                    "features of {} have shape {:?}, expected ({}, {})",
                    nt.name,
                    self.features[t].shape(),
                    nt.count,
                    nt.feature_dim
                )));
            }
            if !self.features[t].is_finite() {
                return Err(Error::validation(format!("features of {} are not finite", nt.name)));
            }
        }
        if self.target.0 >= self.node_types.len() {
            return Err(Error::validation("target type is not a declared node type"));
        }
        if self.labels.len() != self.num_targets() {
            return Err(Error::validation("label vector length differs from target count"));
        }
        if let Some(c) = self.labels.iter().flatten().find(|&&c| c >= self.num_classes) {
            return Err(Error::validation(format!("label {c} outside 0..{}", self.num_classes)));
        }
        for mp in &self.metapaths {
            mp.validate(self)?;
        }
        Ok(())
    }
}

/// Incremental constructor; [`HetGraphBuilder::build`] validates.
#[derive(Debug, Default)]
pub struct HetGraphBuilder {
    node_types: Vec<NodeType>,
    features: Vec<Tensor>,
    edge_types: Vec<EdgeType>,
    edges: Vec<BTreeSet<(usize, usize)>>,
    target: Option<NodeTypeId>,
    labels: Vec<(usize, usize)>,
    num_classes: Option<usize>,
    metapaths: Vec<Metapath>,
    metadata: Vec<(String, String)>,
}

impl HetGraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a node type whose node count and feature dimension are
    /// taken from `features`.
    pub fn node_type(&mut self, name: &str, features: Tensor) -> Result<NodeTypeId> {
        if self.node_types.iter().any(|t| t.name == name) {
            return Err(Error::validation(format!("duplicate node type name {name}")));
        }
        self.node_types.push(NodeType {
            name: name.to_string(),
            count: features.rows(),
            feature_dim: features.cols(),
        });
        self.features.push(features);
        Ok(NodeTypeId(self.node_types.len() - 1))
    }

    pub fn edge_type(&mut self, name: &str, src: NodeTypeId, dst: NodeTypeId) -> Result<EdgeTypeId> {
        if self.edge_types.iter().any(|t| t.name == name) {
            return Err(Error::validation(format!("duplicate edge type name {name}")));
        }
        self.edge_types.push(EdgeType {
            name: name.to_string(),
            src,
            dst,
        });
        self.edges.push(BTreeSet::new());
        Ok(EdgeTypeId(self.edge_types.len() - 1))
    }

    /// Adds an edge; repeated edges collapse to one.
    pub fn edge(&mut self, e: EdgeTypeId, src: usize, dst: usize) -> &mut Self {
        self.edges[e.0].insert((src, dst));
        self
    }

    pub fn target(&mut self, t: NodeTypeId) -> &mut Self {
        self.target = Some(t);
        self
    }

    pub fn label(&mut self, node: usize, class: usize) -> &mut Self {
        self.labels.push((node, class));
        self
    }

    /// Fixes the class count; defaults to one more than the largest label.
    pub fn num_classes(&mut self, c: usize) -> &mut Self {
        self.num_classes = Some(c);
        self
    }

    pub fn metapath(&mut self, mp: Metapath) -> &mut Self {
        self.metapaths.push(mp);
        self
    }

    pub fn meta(&mut self, key: &str, value: &str) -> &mut Self {
        self.metadata.push((key.to_string(), value.to_string()));
        self
    }

    pub fn build(self) -> Result<HetGraph> {
        let target = self
            .target
            .ok_or_else(|| Error::validation("no target node type declared"))?;
        let n_target = self
            .node_types
            .get(target.0)
            .map(|t| t.count)
            .ok_or_else(|| Error::validation("target type is not a declared node type"))?;
        let mut labels = vec![None; n_target];
        for &(node, class) in &self.labels {
            if node >= n_target {
                return Err(Error::validation(format!(
                    "label for node {node} but target type has {n_target} nodes"
                )));
            }
            labels[node] = Some(class);
        }
        let num_classes = self
            .num_classes
            .unwrap_or_else(|| labels.iter().flatten().max().map_or(0, |m| m + 1));
        let g = HetGraph {
            node_types: self.node_types,
            edge_types: self.edge_types,
            edges: self.edges.into_iter().map(|s| s.into_iter().collect()).collect(),
            features: self.features,
            target,
            labels,
            num_classes,
            metapaths: self.metapaths,
            metadata: self.metadata,
        };
        g.validate()?;
        Ok(g)
    }
}

/// A relation of the network schema.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Relation {
    pub name: String,
    pub src: NodeTypeId,
    pub dst: NodeTypeId,
}

/// Meta template of a graph: its node types and typed relations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSchema {
    pub node_types: Vec<(NodeTypeId, String)>,
    pub relations: Vec<Relation>,
}

impl NetworkSchema {
    /// Node types sharing at least one relation with `t`, in id order.
    /// `t` itself is included when a relation connects it to itself.
    pub fn adjacent_types(&self, t: NodeTypeId) -> Vec<NodeTypeId> {
        let mut out = BTreeSet::new();
        for r in &self.relations {
            if r.src == t {
                out.insert(r.dst);
            }
            if r.dst == t {
                out.insert(r.src);
            }
        }
        out.into_iter().collect()
    }
}

pub fn build_schema(graph: &HetGraph) -> Result<NetworkSchema> {
    graph.validate()?;
    let node_types = graph
        .node_types
        .iter()
        .enumerate()
        .map(|(i, t)| (NodeTypeId(i), t.name.clone()))
        .collect();
    let relations: BTreeSet<Relation> = graph
        .edge_types
        .iter()
        .map(|e| Relation {
            name: e.name.clone(),
            src: e.src,
            dst: e.dst,
        })
        .collect();
    Ok(NetworkSchema {
        node_types,
        relations: relations.into_iter().collect(),
    })
}
