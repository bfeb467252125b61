//! Prompt tuning over a frozen encoder: the pairwise template, the
//! contrastive objective with orthogonal class tokens, early-stopped
//! training, prediction, metrics and comparison baselines.

mod baselines;
mod metrics;
mod model;
mod report;
mod train;

pub use baselines::{finetune, finetune_trainable_params, logistic_regression, zero_tuning, BaselineOutcome};
pub use metrics::{argmax_rows, evaluate, ClassScores, Metrics};
pub use model::{cosine, probabilities, project, tuning_loss, Head, PromptForward, PromptModel, TuneContext};
pub use report::{mean_std, summary_row, RunRecord, RESULTS_HEADER};
pub use train::{evaluate_model, tune, EpochEval, PromptTuner, TuneOutcome};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TuneConfig {
    /// 0, or within `[1e-4, 5e-3]`.
    pub lr: f64,
    /// Epochs without validation improvement before stopping, `[20, 100]`.
    pub patience: usize,
    /// Weight of the class-token orthogonality penalty.
    pub lambda: f64,
    pub tau: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Feature tokens per node type.
    pub k: usize,
    /// Separate projection heads for node and class tokens.
    pub separate_heads: bool,
    /// Divide similarities by `tau` at inference as in training.
    pub inference_tau: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            lr: 5e-3,
            patience: 50,
            lambda: 0.01,
            tau: 0.5,
            max_epochs: 300,
            seed: 0,
            k: 5,
            separate_heads: false,
            inference_tau: false,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr == 0.0 || (1e-4..=5e-3).contains(&self.lr)) {
            return Err(Error::config(format!("learning rate {} outside [1e-4, 5e-3]", self.lr)));
        }
        if !(20..=100).contains(&self.patience) {
            return Err(Error::config(format!("patience {} outside [20, 100]", self.patience)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("feature prompt needs K ≥ 1 tokens"));
        }
        Ok(())
    }

    /// Sets one field from its `key=value` spelling.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("cannot parse {key} from {value:?}")))
        }
        match key {
            "lr" => self.lr = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "separate_heads" => self.separate_heads = parse(key, value)?,
            "inference_tau" => self.inference_tau = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests;
