use super::metrics::{argmax_rows, evaluate, Metrics};
use super::model::{PromptModel, TuneContext};
use super::TuneConfig;
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::hetgraph::HetGraph;
use crate::numerics::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::synth::Split;

/// Adam over the prompt model on one labeled set.
pub struct PromptTuner {
    model: PromptModel,
    adam: AdamState,
    cfg: AdamConfig,
    labeled: Vec<usize>,
}

/// Loss and similarities of the state an epoch started from.
pub struct EpochEval {
    pub loss: f64,
    pub similarities: Tensor,
}

impl PromptTuner {
    pub fn new(model: PromptModel, labeled: &[usize], lr: f64) -> Self {
        PromptTuner {
            adam: AdamState::new(model.store()),
            model,
            cfg: AdamConfig::with_lr(lr),
            labeled: labeled.to_vec(),
        }
    }

    pub fn model(&self) -> &PromptModel {
        &self.model
    }

    pub fn into_model(self) -> PromptModel {
        self.model
    }

    /// Scores the current state, then takes one optimizer step.
    pub fn step_with<F>(&mut self, ctx: &TuneContext, mut before_update: F) -> Result<EpochEval>
    where
        F: FnMut(&PromptModel, &EpochEval),
    {
        let mut tape = Tape::new();
        let fwd = self.model.forward(ctx, &mut tape)?;
        let loss = self.model.loss(ctx, &mut tape, &fwd, &self.labeled)?;
        let eval = EpochEval {
            loss: tape.value(loss).item(),
            similarities: tape.value(fwd.similarities).clone(),
        };
        before_update(&self.model, &eval);
        let grads = tape.backward(loss)?;
        let store = self.model.store_mut();
        store.zero_grad();
        store.accumulate(&tape, &grads);
        adam_step(store, &mut self.adam, &self.cfg)?;
        Ok(eval)
    }

    pub fn step(&mut self, ctx: &TuneContext) -> Result<EpochEval> {
        self.step_with(ctx, |_, _| {})
    }
}

/// Best-validation prompt state and the training trace that produced it.
#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub model: PromptModel,
    /// Epoch whose starting state scored best on validation.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_macro_f1: f64,
    /// Training loss at the start of every epoch.
    pub losses: Vec<f64>,
    pub val_macro_f1: Vec<f64>,
}

impl TuneOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one epoch")
    }
}

pub(crate) fn macro_f1_on(sim: &Tensor, ctx: &TuneContext, nodes: &[usize]) -> Result<f64> {
    let pred = argmax_rows(&sim.select_rows(nodes));
    let gold = ctx.labels_of(nodes)?;
    Ok(evaluate(&pred, &gold, ctx.graph.num_classes())?.macro_f1)
}

/// Tunes prompts with the encoder frozen, keeping the state with the
/// best validation Macro-F1 and stopping after `patience` epochs
/// without improvement.
pub fn tune(graph: &HetGraph, enc: &FrozenEncoder, split: &Split, cfg: &TuneConfig) -> Result<TuneOutcome> {
    cfg.validate()?;
    let before = enc.params_hash();
    let ctx = TuneContext::new(graph, enc)?;
    if split.val.is_empty() {
        return Err(Error::Split("validation set is empty".into()));
    }
    let model = PromptModel::init(&ctx, &split.labeled, cfg)?;
    let mut tuner = PromptTuner::new(model, &split.labeled, cfg.lr);
    let mut best: Option<(f64, usize, PromptModel)> = None;
    let mut losses = Vec::new();
    let mut val_history = Vec::new();
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let mut stop = false;
        let mut failure = None;
        tuner.step_with(&ctx, |model, eval| {
            let val = match macro_f1_on(&eval.similarities, &ctx, &split.val) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            };
            losses.push(eval.loss);
            val_history.push(val);
            if best.as_ref().is_none_or(|(b, _, _)| val > *b) {
                best = Some((val, epoch, model.clone()));
                stale = 0;
            } else {
                stale += 1;
                stop = stale >= cfg.patience;
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        if stop {
            break;
        }
    }
    let (best_val, best_epoch, model) = best.expect("max_epochs ≥ 1");
    if enc.params_hash() != before {
        return Err(Error::Contract(
            "frozen encoder parameters changed during tuning".into(),
        ));
    }
    Ok(TuneOutcome {
        model,
        best_epoch,
        epochs_run: losses.len(),
        best_val_macro_f1: best_val,
        losses,
        val_macro_f1: val_history,
    })
}

/// Test metrics of a prompt model.
pub fn evaluate_model(model: &PromptModel, ctx: &TuneContext, nodes: &[usize]) -> Result<Metrics> {
    let pred = model.predict(ctx, nodes)?;
    evaluate(&pred, &ctx.labels_of(nodes)?, ctx.graph.num_classes())
}
