//! Two-level attention over the type view and the metapath view of every
//! target node, fused into one node token.
//!
//! For a view with neighbor set `N_i` (self appended):
//!
//! ```text
//! α_ij = softmax_{j ∈ N_i ∪ {i}} LeakyReLU(aᵀ[h̃_i ‖ h̃_j])
//! h_i  = LeakyReLU(Σ_j α_ij h̃_j)
//! w    = mean_i  a_semᵀ tanh(W h_i + b)
//! β    = softmax over views of w
//! z    = LeakyReLU(W_f [z^MP ‖ z^TP] + b_f)
//! ```

use std::fmt::Write as _;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hetgraph::{HetGraph, NeighborIndex};
use crate::numerics::{kaiming_normal, ParamId, ParamStore, Segments, Tape, Tensor, Var, LEAKY_SLOPE};

/// One attention view over the stacked rows of `H̃`.
#[derive(Clone, Debug)]
struct View {
    name: String,
    /// Segment `i` holds target `i` itself first, then its neighbors.
    segs: Arc<Segments>,
    /// Row of `H̃` of the segment owner, per entry.
    centers: Arc<[usize]>,
    /// Local node ids per entry, for diagnostics.
    locals: Vec<usize>,
}

impl View {
    fn new(name: String, lists: &[Vec<usize>], self_offset: usize, nbr_offset: usize) -> View {
        let mut rows = Vec::with_capacity(lists.len());
        let mut centers = Vec::new();
        let mut locals = Vec::new();
        for (i, l) in lists.iter().enumerate() {
            let mut seg = Vec::with_capacity(l.len() + 1);
            seg.push(self_offset + i);
            locals.push(i);
            for &j in l {
                seg.push(nbr_offset + j);
                locals.push(j);
            }
            centers.extend(std::iter::repeat_n(self_offset + i, seg.len()));
            rows.push(seg);
        }
        View {
            name,
            segs: Arc::new(Segments::from_lists(&rows)),
            centers: centers.into(),
            locals,
        }
    }
}

/// Attention segments for both views, addressed in the stacked row space
/// of `H̃` (all node types in type-id order).
#[derive(Clone, Debug)]
pub struct AggregationIndex {
    num_targets: usize,
    target_offset: usize,
    type_views: Vec<View>,
    metapath_views: Vec<View>,
}

impl AggregationIndex {
    pub fn new(graph: &HetGraph, index: &NeighborIndex) -> AggregationIndex {
        let offsets = graph.type_offsets();
        let t_off = offsets[graph.target().0];
        let type_views = index
            .adjacent_types()
            .iter()
            .enumerate()
            .map(|(m, &a)| {
                let name = graph.node_types()[a.0].name.clone();
                View::new(name, index.type_view(m), t_off, offsets[a.0])
            })
            .collect();
        let metapath_views = index
            .metapath_names()
            .iter()
            .enumerate()
            .map(|(n, name)| View::new(name.clone(), index.metapath_view(n), t_off, t_off))
            .collect();
        AggregationIndex {
            num_targets: index.num_targets(),
            target_offset: t_off,
            type_views,
            metapath_views,
        }
    }

    pub fn num_type_views(&self) -> usize {
        self.type_views.len()
    }

    pub fn num_metapath_views(&self) -> usize {
        self.metapath_views.len()
    }

    pub fn num_targets(&self) -> usize {
        self.num_targets
    }

    pub fn target_offset(&self) -> usize {
        self.target_offset
    }
}

#[derive(Clone, Copy, Debug)]
struct Semantic {
    a: ParamId,
    w: ParamId,
    b: ParamId,
}

/// Parameter handles of the aggregation layer inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AggregationParams {
    dim: usize,
    type_att: Vec<ParamId>,
    type_sem: Semantic,
    mp_att: Vec<ParamId>,
    mp_sem: Semantic,
    fuse_w: ParamId,
    fuse_b: ParamId,
}

impl AggregationParams {
    /// Kaiming-normal weights and zero biases, registered in `store`.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        dim: usize,
        index: &AggregationIndex,
        trainable: bool,
    ) -> Result<AggregationParams> {
        if index.metapath_views.is_empty() {
            return Err(Error::config("metapath aggregation needs at least one metapath"));
        }
        if index.type_views.is_empty() {
            return Err(Error::config(
                "type aggregation needs at least one schema-adjacent type",
            ));
        }
        let att = |store: &mut ParamStore, prefix: &str, views: &[View], rng: &mut ChaCha8Rng| -> Vec<ParamId> {
            views
                .iter()
                .map(|v| {
                    store.add(
                        format!("{prefix}.{}", v.name),
                        kaiming_normal(rng, 2 * dim, 1, 2 * dim),
                        trainable,
                    )
                })
                .collect()
        };
        let type_att = att(store, "agg.type.att", &index.type_views, rng);
        let sem = |store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| Semantic {
            a: store.add(format!("{prefix}.a"), kaiming_normal(rng, dim, 1, dim), trainable),
            w: store.add(format!("{prefix}.W"), kaiming_normal(rng, dim, dim, dim), trainable),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(1, dim), trainable),
        };
        let type_sem = sem(store, "agg.type.sem", rng);
        let mp_att = att(store, "agg.mp.att", &index.metapath_views, rng);
        let mp_sem = sem(store, "agg.mp.sem", rng);
        let fuse_w = store.add("agg.fuse.W", kaiming_normal(rng, 2 * dim, dim, 2 * dim), trainable);
        let fuse_b = store.add("agg.fuse.b", Tensor::zeros(1, dim), trainable);
        Ok(AggregationParams {
            dim,
            type_att,
            type_sem,
            mp_att,
            mp_sem,
            fuse_w,
            fuse_b,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut out = self.type_att.clone();
        out.extend([self.type_sem.a, self.type_sem.w, self.type_sem.b]);
        out.extend(&self.mp_att);
        out.extend([self.mp_sem.a, self.mp_sem.w, self.mp_sem.b, self.fuse_w, self.fuse_b]);
        out
    }

    pub fn type_attention(&self) -> &[ParamId] {
        &self.type_att
    }

    pub fn metapath_attention(&self) -> &[ParamId] {
        &self.mp_att
    }

    pub fn fusion(&self) -> (ParamId, ParamId) {
        (self.fuse_w, self.fuse_b)
    }

    pub fn type_semantic(&self) -> (ParamId, ParamId, ParamId) {
        (self.type_sem.a, self.type_sem.w, self.type_sem.b)
    }

    pub fn metapath_semantic(&self) -> (ParamId, ParamId, ParamId) {
        (self.mp_sem.a, self.mp_sem.w, self.mp_sem.b)
    }
}

/// Result of one view family: per-view attention and hidden states,
/// the semantic weights, and the combined embedding.
#[derive(Clone, Debug)]
pub struct ViewAggregate {
    pub alphas: Vec<Var>,
    pub hidden: Vec<Var>,
    /// `1×M` semantic weights shared by all target nodes.
    pub beta: Var,
    pub z: Var,
}

#[derive(Clone, Debug)]
pub struct AggregationOutput {
    pub type_based: ViewAggregate,
    pub metapath_based: ViewAggregate,
    /// `|V_T|×d` node tokens.
    pub z: Var,
}

fn node_level(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    att: ParamId,
    view: &View,
    dim: usize,
) -> Result<(Var, Var)> {
    let a = tape.param(store, att);
    let a_self = tape.slice_rows(a, 0, dim)?;
    let a_nbr = tape.slice_rows(a, dim, 2 * dim)?;
    let s_self = tape.matmul(h, a_self)?;
    let s_nbr = tape.matmul(h, a_nbr)?;
    let s_self = tape.gather_rows(s_self, view.centers.clone())?;
    let idx: Arc<[usize]> = view.segs.index().into();
    let s_nbr = tape.gather_rows(s_nbr, idx)?;
    let s = tape.add(s_self, s_nbr)?;
    let s = tape.leaky_relu(s, LEAKY_SLOPE)?;
    let alpha = tape.segment_softmax(s, view.segs.clone())?;
    let mixed = tape.segment_attend(alpha, h, view.segs.clone())?;
    let hidden = tape.leaky_relu(mixed, LEAKY_SLOPE)?;
    Ok((alpha, hidden))
}

fn semantic_level(tape: &mut Tape, store: &ParamStore, hidden: &[Var], sem: Semantic) -> Result<(Var, Var)> {
    let a = tape.param(store, sem.a);
    let w = tape.param(store, sem.w);
    let b = tape.param(store, sem.b);
    let mut scores = Vec::with_capacity(hidden.len());
    for &hm in hidden {
        let x = tape.matmul(hm, w)?;
        let x = tape.add_row(x, b)?;
        let x = tape.tanh(x)?;
        let x = tape.matmul(x, a)?;
        scores.push(tape.reduce_mean_rows(x)?);
    }
    let scores = tape.concat_cols(&scores)?;
    let beta = tape.row_softmax(scores)?;
    let mut z = None;
    for (m, &hm) in hidden.iter().enumerate() {
        let bm = tape.slice_cols(beta, m, m + 1)?;
        let term = tape.mul_scalar(hm, bm)?;
        z = Some(match z {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((beta, z.expect("at least one view")))
}

fn aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    views: &[View],
    att: &[ParamId],
    sem: Semantic,
    dim: usize,
) -> Result<ViewAggregate> {
    let mut alphas = Vec::with_capacity(views.len());
    let mut hidden = Vec::with_capacity(views.len());
    for (view, &a) in views.iter().zip(att) {
        let (alpha, hm) = node_level(tape, store, h, a, view, dim)?;
        alphas.push(alpha);
        hidden.push(hm);
    }
    let (beta, z) = semantic_level(tape, store, &hidden, sem)?;
    Ok(ViewAggregate {
        alphas,
        hidden,
        beta,
        z,
    })
}

fn check(tape: &Tape, h: Var, params: &AggregationParams, index: &AggregationIndex) -> Result<()> {
    let t = tape.value(h);
    if t.cols() != params.dim {
        return Err(Error::Shape {
            op: "aggregate",
            lhs: t.shape(),
            rhs: (t.rows(), params.dim),
        });
    }
    if index.type_views.len() != params.type_att.len() || index.metapath_views.len() != params.mp_att.len() {
        return Err(Error::Contract(
            "aggregation index and parameters disagree on view counts".into(),
        ));
    }
    Ok(())
}

/// Type view: `z^TP`.
pub fn type_based_aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    index: &AggregationIndex,
    params: &AggregationParams,
) -> Result<ViewAggregate> {
    check(tape, h, params, index)?;
    aggregate(
        tape,
        store,
        h,
        &index.type_views,
        &params.type_att,
        params.type_sem,
        params.dim,
    )
}

/// Metapath view: `z^MP`.
pub fn metapath_based_aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    index: &AggregationIndex,
    params: &AggregationParams,
) -> Result<ViewAggregate> {
    check(tape, h, params, index)?;
    if index.metapath_views.is_empty() {
        return Err(Error::config("metapath aggregation needs at least one metapath"));
    }
    aggregate(
        tape,
        store,
        h,
        &index.metapath_views,
        &params.mp_att,
        params.mp_sem,
        params.dim,
    )
}

/// `LeakyReLU(W [z^MP ‖ z^TP] + b)`.
pub fn fuse(tape: &mut Tape, store: &ParamStore, z_tp: Var, z_mp: Var, params: &AggregationParams) -> Result<Var> {
    let cat = tape.concat_cols(&[z_mp, z_tp])?;
    let w = tape.param(store, params.fuse_w);
    let b = tape.param(store, params.fuse_b);
    let x = tape.matmul(cat, w)?;
    let x = tape.add_row(x, b)?;
    tape.leaky_relu(x, LEAKY_SLOPE)
}

/// Both views and the fusion.
pub fn aggregate_all(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    index: &AggregationIndex,
    params: &AggregationParams,
) -> Result<AggregationOutput> {
    let type_based = type_based_aggregate(tape, store, h, index, params)?;
    let metapath_based = metapath_based_aggregate(tape, store, h, index, params)?;
    let z = fuse(tape, store, type_based.z, metapath_based.z, params)?;
    Ok(AggregationOutput {
        type_based,
        metapath_based,
        z,
    })
}

/// Tab-separated attention diagnostics: one `alpha` line per
/// (view, node, neighbor) and one `beta` line per view.
pub fn dump_attention(tape: &Tape, out: &AggregationOutput, index: &AggregationIndex) -> String {
    let mut s = String::from("kind\tfamily\tview\tnode\tneighbor\tweight\n");
    let families = [
        ("type", &out.type_based, &index.type_views),
        ("metapath", &out.metapath_based, &index.metapath_views),
    ];
    for (family, agg, views) in families {
        for (view, &alpha) in views.iter().zip(&agg.alphas) {
            let a = tape.value(alpha);
            for i in 0..view.segs.num_segments() {
                for e in view.segs.range(i) {
                    let nbr = if e == view.segs.range(i).start {
                        "self".to_string()
                    } else {
                        view.locals[e].to_string()
                    };
                    writeln!(s, "alpha\t{family}\t{}\t{i}\t{nbr}\t{:e}", view.name, a.get(e, 0)).unwrap();
                }
            }
        }
        let beta = tape.value(agg.beta);
        for (m, view) in views.iter().enumerate() {
            writeln!(s, "beta\t{family}\t{}\t\t\t{:e}", view.name, beta.get(0, m)).unwrap();
        }
    }
    s
}
