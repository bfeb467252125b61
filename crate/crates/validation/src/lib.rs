//! Few-shot benchmark protocol on ACM-mini: one generated graph, one
//! pre-trained encoder, ten split seeds per setting.

use std::time::Instant;

use hetgpt_core::encoder::{pretrain, EncoderConfig, FrozenEncoder};
use hetgpt_core::hetgraph::HetGraph;
use hetgpt_core::synth::{self, generate, Split, SplitSpec, SyntheticSpec};
use hetgpt_core::tuner::{self, evaluate_model, TuneConfig, TuneContext};
use hetgpt_core::Result;

/// Split seeds of one sweep; seed `s` also seeds the tuner.
pub const SEEDS: std::ops::Range<u64> = 0..10;

/// Outcome of one method on one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmRun {
    pub macro_f1: f64,
    pub best_epoch: usize,
    pub trainable: usize,
}

pub struct Benchmark {
    pub graph: HetGraph,
    pub encoder: FrozenEncoder,
    pub pretrain_secs: f64,
}

impl Benchmark {
    /// ACM-mini from graph seed 0 with a default-config encoder.
    pub fn acm_mini() -> Result<Benchmark> {
        let start = Instant::now();
        let graph = generate(&SyntheticSpec::acm_mini(0))?;
        let (encoder, _) = pretrain(&graph, &EncoderConfig::default())?;
        Ok(Benchmark {
            graph,
            encoder,
            pretrain_secs: start.elapsed().as_secs_f64(),
        })
    }

    pub fn split(&self, shots: usize, seed: u64) -> Result<Split> {
        synth::split(&self.graph, &SplitSpec::new(shots, seed))
    }

    fn config(k: usize, seed: u64) -> TuneConfig {
        TuneConfig {
            k,
            seed,
            ..TuneConfig::default()
        }
    }

    pub fn prompt(&self, shots: usize, k: usize, seed: u64) -> Result<ArmRun> {
        let split = self.split(shots, seed)?;
        let out = tuner::tune(&self.graph, &self.encoder, &split, &Self::config(k, seed))?;
        let ctx = TuneContext::new(&self.graph, &self.encoder)?;
        let test = evaluate_model(&out.model, &ctx, &split.test)?;
        Ok(ArmRun {
            macro_f1: test.macro_f1,
            best_epoch: out.best_epoch,
            trainable: out.model.num_trainable(),
        })
    }

    pub fn finetune(&self, shots: usize, seed: u64) -> Result<ArmRun> {
        let split = self.split(shots, seed)?;
        let out = tuner::finetune(&self.graph, &self.encoder, &split, &Self::config(5, seed))?;
        Ok(ArmRun {
            macro_f1: out.test.macro_f1,
            best_epoch: out.best_epoch,
            trainable: out.trainable_params,
        })
    }

    pub fn zero_tuning(&self, shots: usize, seed: u64) -> Result<f64> {
        let split = self.split(shots, seed)?;
        Ok(tuner::zero_tuning(&self.graph, &self.encoder, &split, &Self::config(5, seed))?.macro_f1)
    }

    pub fn logistic(&self, shots: usize, seed: u64) -> Result<f64> {
        let split = self.split(shots, seed)?;
        Ok(tuner::logistic_regression(&self.graph, &split, &Self::config(5, seed))?
            .test
            .macro_f1)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[usize]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd_lengths() {
        assert_eq!(median(&[3, 1, 2]), 2.0);
        assert_eq!(median(&[4, 1, 3, 2]), 2.5);
        assert_eq!(mean(&[1.0, 2.0]), 1.5);
    }
}
