//! Reference methods: fine-tuning a copy of the encoder with a linear
//! head, the untrained prompt state, and logistic regression on raw
//! target features.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{argmax_rows, evaluate, Metrics};
use super::model::{PromptModel, TuneContext};
use super::train::evaluate_model;
use super::TuneConfig;
use crate::encoder::{Encoder, FrozenEncoder, PropagationIndex};
use crate::error::{Error, Result};
use crate::hetgraph::{HetGraph, NeighborIndex};
use crate::numerics::{adam_step, kaiming_normal, AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::synth::Split;

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub test: Metrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub losses: Vec<f64>,
    pub val_macro_f1: Vec<f64>,
    pub trainable_params: usize,
}

fn labels(graph: &HetGraph, nodes: &[usize]) -> Result<Vec<usize>> {
    nodes
        .iter()
        .map(|&v| graph.labels()[v].ok_or_else(|| Error::Split(format!("target node {v} has no label"))))
        .collect()
}

fn check_classes(graph: &HetGraph, labeled: &[usize]) -> Result<()> {
    let ys = labels(graph, labeled)?;
    for c in 0..graph.num_classes() {
        if !ys.contains(&c) {
            return Err(Error::Split(format!("class {c} has no labeled nodes")));
        }
    }
    Ok(())
}

/// Mean cross-entropy of `logits` rows `nodes` against `ys`.
fn cross_entropy(tape: &mut Tape, logits: Var, nodes: &[usize], ys: &[usize]) -> Result<Var> {
    let rows = tape.gather_rows(logits, Arc::from(nodes))?;
    let logp = tape.row_log_softmax(rows)?;
    let entries: Arc<[(usize, usize)]> = ys.iter().copied().enumerate().collect();
    let picked = tape.pick(logp, entries)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / nodes.len() as f64)
}

/// A model scored by `|V_T|×C` logits whose parameters live in one or
/// more stores.
trait Classifier {
    fn logits(&self, tape: &mut Tape) -> Result<Var>;
    fn stores(&mut self) -> Vec<&mut ParamStore>;
}

/// Shared early-stopping loop: Adam on every trainable parameter of
/// `model`, best validation Macro-F1 kept.
fn train_classifier(
    graph: &HetGraph,
    split: &Split,
    cfg: &TuneConfig,
    model: &mut impl Classifier,
) -> Result<BaselineOutcome> {
    check_classes(graph, &split.labeled)?;
    let c = graph.num_classes();
    let ys = labels(graph, &split.labeled)?;
    let val_gold = labels(graph, &split.val)?;
    let test_gold = labels(graph, &split.test)?;
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut adam: Vec<AdamState> = model.stores().into_iter().map(|s| AdamState::new(s)).collect();
    let mut best: Option<(f64, usize, Tensor)> = None;
    let mut losses = Vec::new();
    let mut val_history = Vec::new();
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let mut tape = Tape::new();
        let logits = model.logits(&mut tape)?;
        let scores = tape.value(logits).clone();
        let val = evaluate(&argmax_rows(&scores.select_rows(&split.val)), &val_gold, c)?.macro_f1;
        let loss = cross_entropy(&mut tape, logits, &split.labeled, &ys)?;
        losses.push(tape.value(loss).item());
        val_history.push(val);
        if best.as_ref().is_none_or(|(b, _, _)| val > *b) {
            best = Some((val, epoch, scores));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
        let grads = tape.backward(loss)?;
        for (store, state) in model.stores().into_iter().zip(&mut adam) {
            store.zero_grad();
            store.accumulate(&tape, &grads);
            adam_step(store, state, &adam_cfg)?;
        }
    }
    let (_, best_epoch, scores) = best.expect("max_epochs ≥ 1");
    let test = evaluate(&argmax_rows(&scores.select_rows(&split.test)), &test_gold, c)?;
    Ok(BaselineOutcome {
        test,
        best_epoch,
        epochs_run: losses.len(),
        losses,
        val_macro_f1: val_history,
        trainable_params: model.stores().iter().map(|s| s.num_trainable()).sum(),
    })
}

struct LinearHead {
    store: ParamStore,
    w: ParamId,
    b: ParamId,
}

impl LinearHead {
    fn new(seed: u64, d: usize, c: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.add("cls.W", kaiming_normal(&mut rng, d, c, d), true);
        let b = store.add("cls.b", Tensor::zeros(1, c), true);
        LinearHead { store, w, b }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.store, self.w);
        let b = tape.param(&self.store, self.b);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

struct FinetuneArm<'g> {
    graph: &'g HetGraph,
    encoder: Encoder,
    prop: PropagationIndex,
    head: LinearHead,
}

impl Classifier for FinetuneArm<'_> {
    fn logits(&self, tape: &mut Tape) -> Result<Var> {
        let x: Vec<Var> = self
            .graph
            .all_features()
            .iter()
            .map(|f| tape.constant(f.clone()))
            .collect();
        let out = self.encoder.forward(tape, self.graph, &x, &self.prop)?;
        self.head.apply(tape, out.target)
    }

    fn stores(&mut self) -> Vec<&mut ParamStore> {
        vec![self.encoder.store_mut(), &mut self.head.store]
    }
}

struct LogisticArm {
    x: Tensor,
    head: LinearHead,
}

impl Classifier for LogisticArm {
    fn logits(&self, tape: &mut Tape) -> Result<Var> {
        let x = tape.constant(self.x.clone());
        self.head.apply(tape, x)
    }

    fn stores(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.head.store]
    }
}

/// Trainable parameters of [`finetune`]: the encoder's projection,
/// propagation and fusion weights plus a `d×C` head.
pub fn finetune_trainable_params(enc: &FrozenEncoder, num_classes: usize) -> usize {
    let e = enc.encoder();
    let head_b = e.store().value(e.bilinear()).len();
    e.store().iter().map(|p| p.value.len()).sum::<usize>() - head_b + (enc.dim() + 1) * num_classes
}

/// Fine-tunes a copy of the encoder together with a linear head under
/// cross-entropy, with the same optimizer and early stopping as
/// prompt tuning. The contrastive head stays frozen.
pub fn finetune(graph: &HetGraph, enc: &FrozenEncoder, split: &Split, cfg: &TuneConfig) -> Result<BaselineOutcome> {
    cfg.validate()?;
    enc.check_graph(graph)?;
    let mut encoder = enc.thaw_copy();
    let bilinear = encoder.bilinear();
    encoder.store_mut().set_param_trainable(bilinear, false);
    let mut arm = FinetuneArm {
        graph,
        encoder,
        prop: PropagationIndex::new(&NeighborIndex::build(graph)?),
        head: LinearHead::new(cfg.seed, enc.dim(), graph.num_classes()),
    };
    train_classifier(graph, split, cfg, &mut arm)
}

/// Test metrics of the initial prompt state, before any tuning step.
pub fn zero_tuning(graph: &HetGraph, enc: &FrozenEncoder, split: &Split, cfg: &TuneConfig) -> Result<Metrics> {
    cfg.validate()?;
    let ctx = TuneContext::new(graph, enc)?;
    let model = PromptModel::init(&ctx, &split.labeled, cfg)?;
    evaluate_model(&model, &ctx, &split.test)
}

/// Multinomial logistic regression on the raw target features.
pub fn logistic_regression(graph: &HetGraph, split: &Split, cfg: &TuneConfig) -> Result<BaselineOutcome> {
    cfg.validate()?;
    let x = graph.features(graph.target()).clone();
    let head = LinearHead::new(cfg.seed, x.cols(), graph.num_classes());
    train_classifier(graph, split, cfg, &mut LogisticArm { x, head })
}
