//! The trainable prompt state and its forward pass.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TuneConfig;
use crate::aggregation::{aggregate_all, AggregationIndex, AggregationOutput, AggregationParams};
use crate::checkpoint::Checkpoint;
use crate::encoder::{FrozenEncoder, PropagationIndex};
use crate::error::{Error, Result};
use crate::hetgraph::{graph_fingerprint, HetGraph, NeighborIndex};
use crate::numerics::{
    finite_diff_check_with, softmax_in_place, GradCheckReport, ParamId, ParamStore, Stencil, Tape, Tensor, Var,
};
use crate::prompts::{init_class_prompt, init_feature_prompt, inject};

const CHECKPOINT_KIND: &str = "hetgpt-prompt";

/// Graph-derived indices shared by every forward pass on one graph.
pub struct TuneContext<'a> {
    pub graph: &'a HetGraph,
    pub encoder: &'a FrozenEncoder,
    prop: PropagationIndex,
    agg: AggregationIndex,
}

impl<'a> TuneContext<'a> {
    /// Fails with a checkpoint error if `encoder` was trained on another graph.
    pub fn new(graph: &'a HetGraph, encoder: &'a FrozenEncoder) -> Result<Self> {
        encoder.check_graph(graph)?;
        let index = NeighborIndex::build(graph)?;
        Ok(TuneContext {
            graph,
            encoder,
            prop: PropagationIndex::new(&index),
            agg: AggregationIndex::new(graph, &index),
        })
    }

    pub fn aggregation_index(&self) -> &AggregationIndex {
        &self.agg
    }

    /// Labels of `nodes`; unlabeled nodes are a split error.
    pub fn labels_of(&self, nodes: &[usize]) -> Result<Vec<usize>> {
        nodes
            .iter()
            .map(|&v| {
                self.graph
                    .labels()
                    .get(v)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::Split(format!("target node {v} has no label")))
            })
            .collect()
    }
}

/// Linear map `x W + b` applied to node tokens and class tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
}

/// `x W + b` on the tape.
pub fn project(tape: &mut Tape, store: &ParamStore, x: Var, head: Head) -> Result<Var> {
    let w = tape.param(store, head.w);
    let b = tape.param(store, head.b);
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// `n×C` cosine similarities between the rows of `a` and of `b`.
pub fn cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = tape.l2_normalize_rows(a)?;
    let bn = tape.l2_normalize_rows(b)?;
    let bt = tape.transpose(bn)?;
    tape.matmul(an, bt)
}

/// InfoNCE over class tokens plus the orthogonality penalty on raw `Q`:
///
/// ```text
/// −Σ_v log softmax_c(sim(z'_v, q'_c) / τ)[y_v] + λ‖QQᵀ − I‖²_F
/// ```
///
/// `labeled` indexes rows of `node_tokens`; `labels` runs parallel to it.
#[allow(clippy::too_many_arguments)]
pub fn tuning_loss(
    tape: &mut Tape,
    node_tokens: Var,
    class_tokens: Var,
    raw_class_tokens: Var,
    labeled: &[usize],
    labels: &[usize],
    tau: f64,
    lambda: f64,
) -> Result<Var> {
    let sim = cosine(tape, node_tokens, class_tokens)?;
    tuning_loss_from_similarities(tape, sim, raw_class_tokens, labeled, labels, tau, lambda)
}

pub(crate) fn tuning_loss_from_similarities(
    tape: &mut Tape,
    sim: Var,
    raw_class_tokens: Var,
    labeled: &[usize],
    labels: &[usize],
    tau: f64,
    lambda: f64,
) -> Result<Var> {
    if labeled.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} labeled nodes but {} labels",
            labeled.len(),
            labels.len()
        )));
    }
    let classes = tape.value(sim).cols();
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::validation(format!("label {bad} outside 0..{classes}")));
    }
    let rows = tape.gather_rows(sim, labeled.into())?;
    let logits = tape.scale(rows, 1.0 / tau)?;
    let logp = tape.row_log_softmax(logits)?;
    let entries: Arc<[(usize, usize)]> = labels.iter().copied().enumerate().collect();
    let picked = tape.pick(logp, entries)?;
    let total = tape.sum_all(picked)?;
    let nce = tape.scale(total, -1.0)?;

    let qt = tape.transpose(raw_class_tokens)?;
    let gram = tape.matmul(raw_class_tokens, qt)?;
    let eye = tape.constant(Tensor::identity(tape.value(gram).rows()));
    let diff = tape.sub(gram, eye)?;
    let orth = tape.frobenius_norm_sq(diff)?;
    let orth = tape.scale(orth, lambda)?;
    tape.add(nce, orth)
}

/// Class probabilities from similarities: a row softmax, scaled by
/// `1/τ` only when `tau` is given.
pub fn probabilities(sim: &Tensor, tau: Option<f64>) -> Tensor {
    let mut p = sim.clone();
    if let Some(tau) = tau {
        p.scale_in_place(1.0 / tau);
    }
    for r in 0..p.rows() {
        softmax_in_place(p.row_mut(r));
    }
    p
}

/// Tape handles of one forward pass.
pub struct PromptForward {
    pub aggregation: AggregationOutput,
    /// `|V_T|×d` node tokens before projection.
    pub node_tokens: Var,
    pub projected_nodes: Var,
    pub class_tokens: Var,
    pub projected_classes: Var,
    /// `|V_T|×C` cosine similarities.
    pub similarities: Var,
}

/// Class tokens, feature tokens, aggregation weights and projection heads,
/// all in one parameter store.
#[derive(Clone, Debug)]
pub struct PromptModel {
    store: ParamStore,
    class_tokens: ParamId,
    feature_tokens: Vec<ParamId>,
    aggregation: AggregationParams,
    node_head: Head,
    class_head: Head,
    k: usize,
    tau: f64,
    lambda: f64,
    inference_tau: bool,
    encoder_hash: String,
}

impl PromptModel {
    /// Fresh parameters with zero class tokens.
    fn with_shapes(ctx: &TuneContext, cfg: &TuneConfig) -> Result<PromptModel> {
        cfg.validate()?;
        let graph = ctx.graph;
        let dim = ctx.encoder.dim();
        let mut store = ParamStore::new();
        let prompt = init_feature_prompt(graph, cfg.k, cfg.seed)?;
        let feature_tokens = graph
            .node_types()
            .iter()
            .zip(prompt.into_tokens())
            .map(|(t, f)| store.add(format!("prompt.F.{}", t.name), f, true))
            .collect();
        let class_tokens = store.add("prompt.Q", Tensor::zeros(graph.num_classes(), dim), true);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let aggregation = AggregationParams::init(&mut store, &mut rng, dim, &ctx.agg, true)?;
        let head = |store: &mut ParamStore, prefix: &str| Head {
            w: store.add(format!("{prefix}.W"), Tensor::identity(dim), true),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(1, dim), true),
        };
        let node_head = head(&mut store, "head");
        let class_head = if cfg.separate_heads {
            head(&mut store, "head.class")
        } else {
            node_head
        };
        Ok(PromptModel {
            store,
            class_tokens,
            feature_tokens,
            aggregation,
            node_head,
            class_head,
            k: cfg.k,
            tau: cfg.tau,
            lambda: cfg.lambda,
            inference_tau: cfg.inference_tau,
            encoder_hash: ctx.encoder.params_hash(),
        })
    }

    /// Initial state: Kaiming feature tokens and aggregation weights,
    /// identity heads, and class tokens at the mean frozen embedding of
    /// each class's labeled nodes.
    pub fn init(ctx: &TuneContext, labeled: &[usize], cfg: &TuneConfig) -> Result<PromptModel> {
        let mut model = Self::with_shapes(ctx, cfg)?;
        let labels = ctx.labels_of(labeled)?;
        let mut present = vec![false; ctx.graph.num_classes()];
        labels.iter().for_each(|&c| present[c] = true);
        if let Some(c) = present.iter().position(|&p| !p) {
            return Err(Error::Split(format!("class {c} has no labeled nodes")));
        }
        let (h, _) = ctx.encoder.embed(ctx.graph, ctx.graph.all_features())?;
        let off = ctx.graph.type_offsets()[ctx.graph.target().0];
        let rows: Vec<usize> = labeled.iter().map(|&v| off + v).collect();
        let q = init_class_prompt(&h, &rows, &labels, ctx.graph.num_classes())?;
        model.store.set_value(model.class_tokens, q)?;
        Ok(model)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn class_tokens(&self) -> &Tensor {
        self.store.value(self.class_tokens)
    }

    pub fn feature_tokens(&self) -> Vec<&Tensor> {
        self.feature_tokens.iter().map(|&id| self.store.value(id)).collect()
    }

    pub fn aggregation(&self) -> &AggregationParams {
        &self.aggregation
    }

    pub fn heads(&self) -> (Head, Head) {
        (self.node_head, self.class_head)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }

    /// `‖QQᵀ − I‖²_F` of the current class tokens.
    pub fn orthogonality_gap(&self) -> f64 {
        let q = self.class_tokens();
        let mut g = q.matmul(&q.transpose()).expect("square by construction");
        for i in 0..g.rows() {
            g.set(i, i, g.get(i, i) - 1.0);
        }
        g.frobenius_norm_sq()
    }

    /// Feature injection, frozen encoder, aggregation, projection.
    pub fn forward(&self, ctx: &TuneContext, tape: &mut Tape) -> Result<PromptForward> {
        let graph = ctx.graph;
        let mut features = Vec::with_capacity(self.feature_tokens.len());
        for (x, &f) in graph.all_features().iter().zip(&self.feature_tokens) {
            let xv = tape.constant(x.clone());
            let fv = tape.param(&self.store, f);
            features.push(inject(tape, xv, fv)?);
        }
        let encoded = ctx.encoder.forward(tape, graph, &features, &ctx.prop)?;
        let aggregation = aggregate_all(tape, &self.store, encoded.h, &ctx.agg, &self.aggregation)?;
        let node_tokens = aggregation.z;
        let projected_nodes = project(tape, &self.store, node_tokens, self.node_head)?;
        let class_tokens = tape.param(&self.store, self.class_tokens);
        let projected_classes = project(tape, &self.store, class_tokens, self.class_head)?;
        let similarities = cosine(tape, projected_nodes, projected_classes)?;
        Ok(PromptForward {
            aggregation,
            node_tokens,
            projected_nodes,
            class_tokens,
            projected_classes,
            similarities,
        })
    }

    /// Tuning objective over `labeled` on a finished forward pass.
    pub fn loss(&self, ctx: &TuneContext, tape: &mut Tape, fwd: &PromptForward, labeled: &[usize]) -> Result<Var> {
        let labels = ctx.labels_of(labeled)?;
        tuning_loss_from_similarities(
            tape,
            fwd.similarities,
            fwd.class_tokens,
            labeled,
            &labels,
            self.tau,
            self.lambda,
        )
    }

    /// Compares the analytic gradient of the tuning objective with
    /// five-point central differences for every trainable parameter.
    pub fn gradient_check(&self, ctx: &TuneContext, labeled: &[usize], h: f64, tol: f64) -> Result<GradCheckReport> {
        let mut probe = self.clone();
        let mut store = self.store.clone();
        finite_diff_check_with(
            &mut store,
            |s, tape| {
                probe.store = s.clone();
                let fwd = probe.forward(ctx, tape)?;
                probe.loss(ctx, tape, &fwd, labeled)
            },
            h,
            tol,
            Stencil::FivePoint,
        )
    }

    /// `|V_T|×C` similarities between projected node and class tokens.
    pub fn similarities(&self, ctx: &TuneContext) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward(ctx, &mut tape)?;
        Ok(tape.value(fwd.similarities).clone())
    }

    /// `|V_T|×d` fused node tokens.
    pub fn node_tokens(&self, ctx: &TuneContext) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward(ctx, &mut tape)?;
        Ok(tape.value(fwd.node_tokens).clone())
    }

    /// Probability rows for `nodes`; `τ` applies only when the model was
    /// configured with `inference_tau`.
    pub fn predict_proba(&self, ctx: &TuneContext, nodes: &[usize]) -> Result<Tensor> {
        let sim = self.similarities(ctx)?;
        Ok(probabilities(
            &sim.select_rows(nodes),
            self.inference_tau.then_some(self.tau),
        ))
    }

    /// Most probable class per node, lowest index on ties.
    pub fn predict(&self, ctx: &TuneContext, nodes: &[usize]) -> Result<Vec<usize>> {
        Ok(super::metrics::argmax_rows(&self.predict_proba(ctx, nodes)?))
    }

    /// `(z'_v, q'_c)` for one node and one class.
    pub fn template(&self, ctx: &TuneContext, v: usize, c: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if c >= ctx.graph.num_classes() {
            return Err(Error::validation(format!(
                "class {c} outside 0..{}",
                ctx.graph.num_classes()
            )));
        }
        if v >= ctx.graph.num_targets() {
            return Err(Error::validation(format!("node {v} is not a target node")));
        }
        let mut tape = Tape::new();
        let fwd = self.forward(ctx, &mut tape)?;
        Ok((
            tape.value(fwd.projected_nodes).row(v).to_vec(),
            tape.value(fwd.projected_classes).row(c).to_vec(),
        ))
    }

    pub fn to_checkpoint(&self, ctx: &TuneContext) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set("k", vec![self.k.to_string()]);
        ck.set("classes", vec![ctx.graph.num_classes().to_string()]);
        ck.set("dim", vec![ctx.encoder.dim().to_string()]);
        ck.set("tau", vec![self.tau.to_string()]);
        ck.set("lambda", vec![self.lambda.to_string()]);
        ck.set("inference_tau", vec![self.inference_tau.to_string()]);
        ck.set("separate_heads", vec![(self.node_head != self.class_head).to_string()]);
        ck.set("encoder_hash", vec![self.encoder_hash.clone()]);
        ck.set("graph_fingerprint", vec![graph_fingerprint(ctx.graph)]);
        for p in self.store.iter() {
            ck.push_tensor(&p.name, p.value.clone());
        }
        ck
    }

    /// Restores a model saved by [`PromptModel::to_checkpoint`] against
    /// the same graph and encoder.
    pub fn from_checkpoint(ck: &Checkpoint, ctx: &TuneContext) -> Result<PromptModel> {
        let hash = ck.value("encoder_hash")?;
        if hash != ctx.encoder.params_hash() {
            return Err(Error::Checkpoint("prompt was tuned against a different encoder".into()));
        }
        if ck.value("graph_fingerprint")? != graph_fingerprint(ctx.graph) {
            return Err(Error::Checkpoint("prompt was tuned on a different graph".into()));
        }
        let cfg = TuneConfig {
            k: ck.parse_value("k")?,
            tau: ck.parse_value("tau")?,
            lambda: ck.parse_value("lambda")?,
            inference_tau: ck.parse_value("inference_tau")?,
            separate_heads: ck.parse_value("separate_heads")?,
            lr: 0.0,
            ..TuneConfig::default()
        };
        let mut model = Self::with_shapes(ctx, &cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.get(id).name.clone();
            let t = ck.tensor(&name)?.clone();
            model
                .store
                .set_value(id, t)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(model)
    }
}
