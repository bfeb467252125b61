//! Tab-separated results records.

use std::fmt::Write as _;

pub const RESULTS_HEADER: &str =
    "dataset\tmethod\tseed\tshots\tk\tlambda\ttau\tlr\tepochs\tmacro_f1\tmicro_f1\ttrainable_params\tfrozen_params";

/// One run of one method. Wall-clock time is kept out of the record so
/// identical configs reproduce identical rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub shots: usize,
    pub k: usize,
    pub lambda: f64,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

impl RunRecord {
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}",
            self.dataset,
            self.method,
            self.seed,
            self.shots,
            self.k,
            self.lambda,
            self.tau,
            self.lr,
            self.epochs,
            self.macro_f1,
            self.micro_f1,
            self.trainable_params,
            self.frozen_params
        )
    }
}

/// Sample mean and standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Row with `mean±std` in the epoch and score columns and `summary` in
/// place of the seed. All records must share the method.
pub fn summary_row(records: &[RunRecord]) -> String {
    let first = &records[0];
    let col = |f: &dyn Fn(&RunRecord) -> f64, prec: usize| {
        let (m, s) = mean_std(&records.iter().map(f).collect::<Vec<_>>());
        format!("{m:.prec$}±{s:.prec$}")
    };
    let mut row = String::new();
    write!(
        row,
        "{}\t{}\tsummary\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        first.dataset,
        first.method,
        first.shots,
        first.k,
        first.lambda,
        first.tau,
        first.lr,
        col(&|r| r.epochs as f64, 1),
        col(&|r| r.macro_f1, 6),
        col(&|r| r.micro_f1, 6),
        first.trainable_params,
        first.frozen_params
    )
    .unwrap();
    row
}
