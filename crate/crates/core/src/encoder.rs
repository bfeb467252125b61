//! Pre-trainable heterogeneous graph encoder and its contrastive head.
//!
//! Every node type is projected to `d` dimensions. Target nodes then mix
//! in one round of mean propagation per metapath:
//!
//! ```text
//! p   = X_A W_A + b_A
//! v_P = LeakyReLU(mean_{j ∈ N^P(i)} p_j · M_P)
//! h_i = p_i + Σ_P β_P v_P,   β = softmax(fusion logits)
//! ```
//!
//! Non-target rows of `H` are the projections themselves. Pre-training
//! contrasts metapath views of the same node against other nodes in the
//! batch.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{tensors_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::hetgraph::{graph_fingerprint, HetGraph, NeighborIndex};
use crate::numerics::{
    adam_step, kaiming_normal, AdamConfig, AdamState, ParamId, ParamStore, Segments, Tape, Tensor, Var, LEAKY_SLOPE,
};

const CHECKPOINT_KIND: &str = "hetgpt-encoder";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub tau_pre: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            epochs: 200,
            lr: 1e-3,
            tau_pre: 0.5,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        if !(self.tau_pre > 0.0 && self.tau_pre.is_finite()) {
            return Err(Error::config(format!("tau_pre must be positive, got {}", self.tau_pre)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        Ok(())
    }
}

/// Constant mean-aggregation weights for every metapath view.
#[derive(Clone, Debug)]
pub struct PropagationIndex {
    views: Vec<(Arc<Segments>, Tensor)>,
}

impl PropagationIndex {
    pub fn new(index: &NeighborIndex) -> Self {
        let views = (0..index.metapath_names().len())
            .map(|n| {
                let lists = index.metapath_view(n);
                let mut w = Vec::new();
                for l in lists {
                    let inv = 1.0 / l.len().max(1) as f64;
                    w.extend(std::iter::repeat_n(inv, l.len()));
                }
                (Arc::new(Segments::from_lists(lists)), Tensor::column(&w))
            })
            .collect();
        PropagationIndex { views }
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }
}

/// Tape handles produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// All nodes, stacked by type id.
    pub h: Var,
    /// Target rows of `h`.
    pub target: Var,
    /// One `|V_T|×d` view per metapath.
    pub views: Vec<Var>,
}

/// Encoder parameters θ plus the bilinear head ψ.
#[derive(Clone, Debug)]
pub struct Encoder {
    store: ParamStore,
    proj: Vec<(ParamId, ParamId)>,
    prop: Vec<ParamId>,
    fusion: ParamId,
    bilinear: ParamId,
    tau_pre: f64,
    dim: usize,
    type_names: Vec<String>,
    feature_dims: Vec<usize>,
    metapath_names: Vec<String>,
    graph_fingerprint: String,
}

impl Encoder {
    /// Kaiming-initialized weights, zero biases, uniform view fusion, and
    /// an identity bilinear head (plain cosine).
    pub fn init(graph: &HetGraph, dim: usize, tau_pre: f64, rng: &mut ChaCha8Rng) -> Result<Encoder> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        let mut store = ParamStore::new();
        let mut proj = Vec::new();
        for t in graph.node_types() {
            let w = kaiming_normal(rng, t.feature_dim, dim, t.feature_dim);
            let wid = store.add(format!("proj.W.{}", t.name), w, true);
            let bid = store.add(format!("proj.b.{}", t.name), Tensor::zeros(1, dim), true);
            proj.push((wid, bid));
        }
        let prop = graph
            .metapaths()
            .iter()
            .map(|mp| store.add(format!("prop.M.{}", mp.name), kaiming_normal(rng, dim, dim, dim), true))
            .collect();
        let n_views = graph.metapaths().len();
        let fusion = store.add("fusion", Tensor::zeros(1, n_views.max(1)), true);
        let bilinear = store.add("head.B", Tensor::identity(dim), true);
        Ok(Encoder {
            store,
            proj,
            prop,
            fusion,
            bilinear,
            tau_pre,
            dim,
            type_names: graph.node_types().iter().map(|t| t.name.clone()).collect(),
            feature_dims: graph.node_types().iter().map(|t| t.feature_dim).collect(),
            metapath_names: graph.metapaths().iter().map(|m| m.name.clone()).collect(),
            graph_fingerprint: graph_fingerprint(graph),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau_pre(&self) -> f64 {
        self.tau_pre
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn metapath_names(&self) -> &[String] {
        &self.metapath_names
    }

    pub fn graph_fingerprint(&self) -> &str {
        &self.graph_fingerprint
    }

    pub fn bilinear(&self) -> ParamId {
        self.bilinear
    }

    pub fn num_params(&self) -> usize {
        self.store.iter().map(|p| p.value.len()).sum()
    }

    /// Encodes `features` (one var per node type, in type order).
    pub fn forward(
        &self,
        tape: &mut Tape,
        graph: &HetGraph,
        features: &[Var],
        prop: &PropagationIndex,
    ) -> Result<EncoderOutput> {
        if features.len() != self.proj.len() {
            return Err(Error::Shape {
                op: "encode",
                lhs: (features.len(), 0),
                rhs: (self.proj.len(), 0),
            });
        }
        if prop.num_views() != self.prop.len() {
            return Err(Error::Contract(format!(
                "propagation index has {} views, encoder has {}",
                prop.num_views(),
                self.prop.len()
            )));
        }
        let mut projected = Vec::with_capacity(features.len());
        for (&x, &(w, b)) in features.iter().zip(&self.proj) {
            let w = tape.param(&self.store, w);
            let b = tape.param(&self.store, b);
            let xw = tape.matmul(x, w)?;
            projected.push(tape.add_row(xw, b)?);
        }
        let t = graph.target().0;
        let p_t = projected[t];
        let mut views = Vec::with_capacity(self.prop.len());
        for (&m, (segs, weights)) in self.prop.iter().zip(&prop.views) {
            let wts = tape.constant(weights.clone());
            let mean = tape.segment_attend(wts, p_t, segs.clone())?;
            let m = tape.param(&self.store, m);
            let mm = tape.matmul(mean, m)?;
            views.push(tape.leaky_relu(mm, LEAKY_SLOPE)?);
        }
        let mut target = p_t;
        if !views.is_empty() {
            let logits = tape.param(&self.store, self.fusion);
            let beta = tape.row_softmax(logits)?;
            for (n, &v) in views.iter().enumerate() {
                let bn = tape.slice_cols(beta, n, n + 1)?;
                let weighted = tape.mul_scalar(v, bn)?;
                target = tape.add(target, weighted)?;
            }
        }
        projected[t] = target;
        let h = tape.concat_rows(&projected)?;
        Ok(EncoderOutput { h, target, views })
    }

    /// Multi-view InfoNCE on the batch rows: every ordered pair of
    /// metapath views, plus the fused embedding against each view.
    pub fn pretrain_loss(&self, tape: &mut Tape, out: &EncoderOutput, batch: Arc<[usize]>) -> Result<Var> {
        let views: Vec<Var> = out
            .views
            .iter()
            .map(|&v| tape.gather_rows(v, batch.clone()))
            .collect::<Result<_>>()?;
        let h = tape.gather_rows(out.target, batch)?;
        let b = tape.param(&self.store, self.bilinear);
        let mut cross = Vec::new();
        for (a, &va) in views.iter().enumerate() {
            for (c, &vc) in views.iter().enumerate() {
                if a != c {
                    cross.push(info_nce(tape, va, vc, Some(b), self.tau_pre)?);
                }
            }
        }
        let mut anchor = Vec::new();
        for &v in &views {
            anchor.push(info_nce(tape, h, v, Some(b), self.tau_pre)?);
        }
        let cross = mean_of(tape, &cross)?;
        let anchor = mean_of(tape, &anchor)?;
        tape.add(cross, anchor)
    }

    /// Projects constant features; returns `(H, per-view target matrices)`.
    pub fn embed(&self, graph: &HetGraph, features: &[Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        let index = NeighborIndex::build(graph)?;
        let prop = PropagationIndex::new(&index);
        let mut tape = Tape::new();
        let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let out = self.forward(&mut tape, graph, &vars, &prop)?;
        let views = out.views.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((tape.value(out.h).clone(), views))
    }

    pub fn freeze(mut self) -> FrozenEncoder {
        self.store.set_trainable(false);
        FrozenEncoder { inner: self }
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Mean over rows `i` of `−log softmax_j(sim(u_i, v_j)/τ)[i]` where
/// `sim(u, v) = ûᵀ B v̂` on unit-normalized rows (`B = I` when absent).
pub fn info_nce(tape: &mut Tape, anchors: Var, positives: Var, bilinear: Option<Var>, tau: f64) -> Result<Var> {
    let n = tape.value(anchors).rows();
    let u = tape.l2_normalize_rows(anchors)?;
    let v = tape.l2_normalize_rows(positives)?;
    let u = match bilinear {
        Some(b) => tape.matmul(u, b)?,
        None => u,
    };
    let vt = tape.transpose(v)?;
    let sim = tape.matmul(u, vt)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let logp = tape.row_log_softmax(logits)?;
    let diag: Arc<[(usize, usize)]> = (0..n).map(|i| (i, i)).collect();
    let picked = tape.pick(logp, diag)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Per-epoch pre-training losses.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

impl PretrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Trains θ and ψ with Adam on seeded in-batch negatives, then freezes.
pub fn pretrain(graph: &HetGraph, cfg: &EncoderConfig) -> Result<(FrozenEncoder, PretrainReport)> {
    cfg.validate()?;
    if graph.metapaths().len() < 2 {
        return Err(Error::config(format!(
            "pre-training contrasts metapath views and needs at least 2, graph declares {}",
            graph.metapaths().len()
        )));
    }
    let index = NeighborIndex::build(graph)?;
    let prop = PropagationIndex::new(&index);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc = Encoder::init(graph, cfg.dim, cfg.tau_pre, &mut rng)?;
    let mut state = AdamState::new(&enc.store);
    let adam = AdamConfig::with_lr(cfg.lr);
    let n = graph.num_targets();
    let batch_size = cfg.batch_size.min(n);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut batch = rand::seq::index::sample(&mut rng, n, batch_size).into_vec();
        batch.sort_unstable();
        let mut tape = Tape::new();
        let feats: Vec<Var> = graph.all_features().iter().map(|f| tape.constant(f.clone())).collect();
        let out = enc.forward(&mut tape, graph, &feats, &prop)?;
        let loss = enc.pretrain_loss(&mut tape, &out, batch.into())?;
        losses.push(tape.value(loss).item());
        let grads = tape.backward(loss)?;
        enc.store.zero_grad();
        enc.store.accumulate(&tape, &grads);
        adam_step(&mut enc.store, &mut state, &adam)?;
    }
    Ok((enc.freeze(), PretrainReport { losses }))
}

/// Pre-trained encoder with every parameter frozen.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    inner: Encoder,
}

impl FrozenEncoder {
    pub fn encoder(&self) -> &Encoder {
        &self.inner
    }

    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    /// Forward pass with θ bound as constants; gradients still flow to
    /// `features`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        graph: &HetGraph,
        features: &[Var],
        prop: &PropagationIndex,
    ) -> Result<EncoderOutput> {
        debug_assert_eq!(self.inner.store.num_trainable(), 0);
        self.inner.forward(tape, graph, features, prop)
    }

    pub fn embed(&self, graph: &HetGraph, features: &[Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        self.inner.embed(graph, features)
    }

    /// Trainable copy for fine-tuning; this encoder is left untouched.
    pub fn thaw_copy(&self) -> Encoder {
        let mut e = self.inner.clone();
        e.store.set_trainable(true);
        e
    }

    /// SHA-256 of θ and ψ including the temperature.
    pub fn params_hash(&self) -> String {
        let tau = Tensor::scalar(self.inner.tau_pre);
        tensors_hash(
            self.inner
                .store
                .iter()
                .map(|p| (p.name.as_str(), &p.value))
                .chain(std::iter::once(("head.tau", &tau))),
        )
    }

    /// Refuses graphs other than the one the encoder was trained on.
    pub fn check_graph(&self, graph: &HetGraph) -> Result<()> {
        let fp = graph_fingerprint(graph);
        if fp != self.inner.graph_fingerprint {
            return Err(Error::Checkpoint(format!(
                "encoder was trained on graph {} but this graph is {}",
                &self.inner.graph_fingerprint[..12.min(self.inner.graph_fingerprint.len())],
                &fp[..12]
            )));
        }
        Ok(())
    }

    /// Mean cosine between views of the same node and between views of
    /// different nodes, over every ordered pair of distinct views.
    pub fn view_agreement(&self, graph: &HetGraph) -> Result<(f64, f64)> {
        let (_, views) = self.embed(graph, graph.all_features())?;
        let unit: Vec<Tensor> = views.iter().map(unit_rows).collect();
        let n = graph.num_targets();
        let (mut pos, mut neg, mut np, mut nn) = (0.0, 0.0, 0usize, 0usize);
        for (a, ua) in unit.iter().enumerate() {
            for (b, ub) in unit.iter().enumerate() {
                if a == b {
                    continue;
                }
                let s = ua.matmul(&ub.transpose())?;
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            pos += s.get(i, j);
                            np += 1;
                        } else {
                            neg += s.get(i, j);
                            nn += 1;
                        }
                    }
                }
            }
        }
        Ok((pos / np.max(1) as f64, neg / nn.max(1) as f64))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let e = &self.inner;
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set("dim", vec![e.dim.to_string()]);
        ck.set("tau_pre", vec![format!("{:e}", e.tau_pre)]);
        ck.set("graph_fingerprint", vec![e.graph_fingerprint.clone()]);
        ck.set("node_types", e.type_names.clone());
        ck.set("feature_dims", e.feature_dims.iter().map(|d| d.to_string()).collect());
        ck.set("metapaths", e.metapath_names.clone());
        for p in e.store.iter() {
            ck.push_tensor(&p.name, p.value.clone());
        }
        ck
    }

    /// Rebuilds the encoder for `graph`, refusing a fingerprint mismatch.
    pub fn from_checkpoint(ck: &Checkpoint, graph: &HetGraph) -> Result<FrozenEncoder> {
        let dim: usize = ck.parse_value("dim")?;
        let tau_pre: f64 = ck.parse_value("tau_pre")?;
        let fp = ck.value("graph_fingerprint")?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = Encoder::init(graph, dim, tau_pre, &mut rng)?;
        if fp != enc.graph_fingerprint {
            return Err(Error::Checkpoint(format!(
                "checkpoint fingerprint {} does not match graph {}",
                &fp[..12.min(fp.len())],
                &enc.graph_fingerprint[..12]
            )));
        }
        if ck.values("metapaths")? != enc.metapath_names.as_slice() {
            return Err(Error::Checkpoint("checkpoint metapaths differ from the graph's".into()));
        }
        let ids: Vec<ParamId> = enc.store.ids().collect();
        for id in ids {
            let name = enc.store.get(id).name.clone();
            let t = ck.tensor(&name)?;
            enc.store
                .set_value(id, t.clone())
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        }
        Ok(enc.freeze())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path, graph: &HetGraph) -> Result<FrozenEncoder> {
        FrozenEncoder::from_checkpoint(&Checkpoint::load(path, CHECKPOINT_KIND)?, graph)
    }
}

fn unit_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}
