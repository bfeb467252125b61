//! Line-oriented text format.
//!
//! ```text
//! #spec <key>=<value>
//! #nodetype <name> <count> <feature_dim>
//! #edgetype <name> <src_type> <dst_type>
//! #target <type>
//! #classes <C>
//! #metapath <name> <edgetype[:rev]>...
//! N <type> <local_index> <f_1> ... <f_dA>
//! E <edgetype> <src_index> <dst_index>
//! L <local_index> <class>
//! ```
//!
//! Fields are tab-separated on output; any whitespace is accepted on
//! input. Blank lines are ignored.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{HetGraph, HetGraphBuilder, Metapath, MetapathStep};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

struct PendingType {
    name: String,
    data: Vec<f64>,
    seen: Vec<bool>,
    count: usize,
    dim: usize,
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn num<T: std::str::FromStr>(line: usize, field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| perr(line, format!("cannot parse {what} from {field:?}")))
}

pub fn parse_graph(text: &str) -> Result<HetGraph> {
    let mut types: Vec<PendingType> = Vec::new();
    let mut type_ids: HashMap<String, usize> = HashMap::new();
    let mut edge_types: Vec<(String, usize, usize)> = Vec::new();
    let mut edge_ids: HashMap<String, usize> = HashMap::new();
    let mut edges: Vec<(usize, usize, usize)> = Vec::new();
    let mut labels: Vec<(usize, usize, usize)> = Vec::new();
    let mut metapaths: Vec<(String, Vec<(usize, bool)>)> = Vec::new();
    let mut metadata = Vec::new();
    let mut target: Option<usize> = None;
    let mut classes: Option<usize> = None;

    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        let Some((&head, rest)) = fields.split_first() else {
            continue;
        };
        let want = |n: usize| -> Result<()> {
            if rest.len() != n {
                Err(perr(line, format!("{head} expects {n} field(s), found {}", rest.len())))
            } else {
                Ok(())
            }
        };
        match head {
            "#spec" => {
                for kv in rest {
                    let (key, value) = kv
                        .split_once('=')
                        .ok_or_else(|| perr(line, format!("expected key=value, found {kv:?}")))?;
                    metadata.push((key.to_string(), value.to_string()));
                }
            }
            "#nodetype" => {
                want(3)?;
                let name = rest[0].to_string();
                if type_ids.contains_key(&name) {
                    return Err(perr(line, format!("node type {name} declared twice")));
                }
                let count: usize = num(line, rest[1], "node count")?;
                let dim: usize = num(line, rest[2], "feature dimension")?;
                type_ids.insert(name.clone(), types.len());
                types.push(PendingType {
                    name,
                    data: vec![0.0; count * dim],
                    seen: vec![false; count],
                    count,
                    dim,
                });
            }
            "#edgetype" => {
                want(3)?;
                let name = rest[0].to_string();
                if edge_ids.contains_key(&name) {
                    return Err(perr(line, format!("edge type {name} declared twice")));
                }
                let src = *type_ids
                    .get(rest[1])
                    .ok_or_else(|| perr(line, format!("unknown node type {}", rest[1])))?;
                let dst = *type_ids
                    .get(rest[2])
                    .ok_or_else(|| perr(line, format!("unknown node type {}", rest[2])))?;
                edge_ids.insert(name.clone(), edge_types.len());
                edge_types.push((name, src, dst));
            }
            "#target" => {
                want(1)?;
                let t = *type_ids
                    .get(rest[0])
                    .ok_or_else(|| perr(line, format!("unknown node type {}", rest[0])))?;
                target = Some(t);
            }
            "#classes" => {
                want(1)?;
                classes = Some(num(line, rest[0], "class count")?);
            }
            "#metapath" => {
                if rest.len() < 2 {
                    return Err(perr(line, "#metapath needs a name and at least one step"));
                }
                let mut steps = Vec::new();
                for s in &rest[1..] {
                    let (name, reverse) = match s.strip_suffix(":rev") {
                        Some(n) => (n, true),
                        None => (*s, false),
                    };
                    let e = *edge_ids
                        .get(name)
                        .ok_or_else(|| perr(line, format!("unknown edge type {name}")))?;
                    steps.push((e, reverse));
                }
                metapaths.push((rest[0].to_string(), steps));
            }
            "N" => {
                if rest.len() < 2 {
                    return Err(perr(line, "N expects a type and an index"));
                }
                let t = *type_ids
                    .get(rest[0])
                    .ok_or_else(|| perr(line, format!("unknown node type {}", rest[0])))?;
                let i: usize = num(line, rest[1], "node index")?;
                let pt = &mut types[t];
                if i >= pt.count {
                    return Err(perr(
                        line,
                        format!("node {i} out of range for {} ({} nodes)", pt.name, pt.count),
                    ));
                }
                if rest.len() - 2 != pt.dim {
                    return Err(perr(
                        line,
                        format!(
                            "{} features have dimension {}, found {}",
                            pt.name,
                            pt.dim,
                            rest.len() - 2
                        ),
                    ));
                }
                if pt.seen[i] {
                    return Err(perr(line, format!("features for {} node {i} given twice", pt.name)));
                }
                pt.seen[i] = true;
                for (c, f) in rest[2..].iter().enumerate() {
                    let v: f64 = num(line, f, "feature value")?;
                    if !v.is_finite() {
                        return Err(perr(line, "feature value is not finite"));
                    }
                    pt.data[i * pt.dim + c] = v;
                }
            }
            "E" => {
                want(3)?;
                let e = *edge_ids
                    .get(rest[0])
                    .ok_or_else(|| perr(line, format!("unknown edge type {}", rest[0])))?;
                let s: usize = num(line, rest[1], "source index")?;
                let d: usize = num(line, rest[2], "destination index")?;
                let (name, src, dst) = &edge_types[e];
                if s >= types[*src].count || d >= types[*dst].count {
                    return Err(perr(
                        line,
                        format!("edge {name} ({s}, {d}) has an endpoint out of range"),
                    ));
                }
                edges.push((e, s, d));
            }
            "L" => {
                want(2)?;
                let i: usize = num(line, rest[0], "node index")?;
                let c: usize = num(line, rest[1], "class")?;
                labels.push((line, i, c));
            }
            other => return Err(perr(line, format!("unknown directive {other:?}"))),
        }
    }

    let t = target.ok_or_else(|| perr(0, "missing #target directive"))?;
    for pt in &types {
        if pt.dim > 0 {
            if let Some(i) = pt.seen.iter().position(|s| !s) {
                return Err(perr(0, format!("no feature row for {} node {i}", pt.name)));
            }
        }
    }
    let n_target = types[t].count;
    for &(line, i, _) in &labels {
        if i >= n_target {
            return Err(perr(
                line,
                format!("label for node {i} but target type has {n_target} nodes"),
            ));
        }
    }

    let mut b = HetGraphBuilder::new();
    for (key, value) in &metadata {
        b.meta(key, value);
    }
    let mut ids = Vec::with_capacity(types.len());
    for pt in types {
        let f = Tensor::from_vec(pt.count, pt.dim, pt.data)?;
        ids.push(b.node_type(&pt.name, f)?);
    }
    let mut eids = Vec::with_capacity(edge_types.len());
    for (name, s, d) in &edge_types {
        eids.push(b.edge_type(name, ids[*s], ids[*d])?);
    }
    for (e, s, d) in edges {
        b.edge(eids[e], s, d);
    }
    b.target(ids[t]);
    for (_, i, c) in labels {
        b.label(i, c);
    }
    if let Some(c) = classes {
        b.num_classes(c);
    }
    for (name, steps) in metapaths {
        let mp = Metapath::new(
            name,
            steps
                .into_iter()
                .map(|(e, reverse)| MetapathStep {
                    edge_type: eids[e],
                    reverse,
                })
                .collect(),
        );
        b.metapath(mp);
    }
    b.build()
}

pub fn read_graph(path: &Path) -> Result<HetGraph> {
    parse_graph(&std::fs::read_to_string(path)?)
}

/// Canonical serialization; [`parse_graph`] inverts it bit-exactly.
pub fn write_graph(graph: &HetGraph) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let types = graph.node_types();
    for (k, v) in graph.metadata() {
        writeln!(out, "#spec\t{k}={v}").unwrap();
    }
    for t in types {
        writeln!(out, "#nodetype\t{}\t{}\t{}", t.name, t.count, t.feature_dim).unwrap();
    }
    for e in graph.edge_types() {
        writeln!(
            out,
            "#edgetype\t{}\t{}\t{}",
            e.name, types[e.src.0].name, types[e.dst.0].name
        )
        .unwrap();
    }
    writeln!(out, "#target\t{}", types[graph.target().0].name).unwrap();
    writeln!(out, "#classes\t{}", graph.num_classes()).unwrap();
    for mp in graph.metapaths() {
        write!(out, "#metapath\t{}", mp.name).unwrap();
        for s in &mp.steps {
            let name = &graph.edge_types()[s.edge_type.0].name;
            write!(out, "\t{name}{}", if s.reverse { ":rev" } else { "" }).unwrap();
        }
        out.push('\n');
    }
    for (t, nt) in types.iter().enumerate() {
        if nt.feature_dim == 0 {
            continue;
        }
        let f = &graph.all_features()[t];
        for i in 0..nt.count {
            write!(out, "N\t{}\t{i}", nt.name).unwrap();
            for v in f.row(i) {
                write!(out, "\t{v:e}").unwrap();
            }
            out.push('\n');
        }
    }
    for (e, et) in graph.edge_types().iter().enumerate() {
        for &(s, d) in graph.edges(super::EdgeTypeId(e)) {
            writeln!(out, "E\t{}\t{s}\t{d}", et.name).unwrap();
        }
    }
    for (i, l) in graph.labels().iter().enumerate() {
        if let Some(c) = l {
            writeln!(out, "L\t{i}\t{c}").unwrap();
        }
    }
    out
}

/// SHA-256 of the canonical serialization, hex encoded.
pub fn graph_fingerprint(graph: &HetGraph) -> String {
    hex::encode(Sha256::digest(write_graph(graph).as_bytes()))
}
