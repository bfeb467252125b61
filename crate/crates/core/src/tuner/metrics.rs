use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassScores>,
    /// `confusion[gold][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// Single-label multiclass scores. Macro-F1 averages over classes that
/// occur in `gold` or in `predictions`; micro-F1 equals accuracy.
pub fn evaluate(predictions: &[usize], gold: &[usize], num_classes: usize) -> Result<Metrics> {
    if predictions.len() != gold.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::validation("nothing to evaluate"));
    }
    if let Some(&bad) = predictions.iter().chain(gold).find(|&&c| c >= num_classes) {
        return Err(Error::validation(format!("class {bad} outside 0..{num_classes}")));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &g) in predictions.iter().zip(gold) {
        confusion[g][p] += 1;
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let mut f1_sum = 0.0;
    let mut counted = 0usize;
    let mut correct = 0usize;
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let f1 = ratio(2 * tp, support + predicted);
        correct += tp;
        if support + predicted > 0 {
            f1_sum += f1;
            counted += 1;
        }
        per_class.push(ClassScores {
            precision: ratio(tp, predicted),
            recall: ratio(tp, support),
            f1,
            support,
        });
    }
    Ok(Metrics {
        macro_f1: f1_sum / counted as f64,
        micro_f1: correct as f64 / gold.len() as f64,
        per_class,
        confusion,
    })
}

/// Row-wise argmax; ties go to the lowest column.
pub fn argmax_rows(t: &crate::numerics::Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
