//! Per-class binary metrics for multi-label predictions.
//!
//! Weighted accuracy is balanced accuracy, `(TP/P + TN/N) / 2`. When a class
//! has no positives (or no negatives) in the evaluated set, the undefined
//! rate is dropped and the other one is reported alone.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub weighted_accuracy: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub average: ClassMetrics,
}

impl MetricsReport {
    /// `class,accuracy,weighted_accuracy,f1`, one row per class then `average`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,accuracy,weighted_accuracy,f1\n");
        let row = |out: &mut String, name: &str, m: &ClassMetrics| {
            let _ = writeln!(out, "{name},{:.6},{:.6},{:.6}", m.accuracy, m.weighted_accuracy, m.f1);
        };
        for (c, m) in self.per_class.iter().enumerate() {
            row(&mut out, &c.to_string(), m);
        }
        row(&mut out, "average", &self.average);
        out
    }
}

/// `preds[sample][class]` against `targets[sample][class]`, both 0/1.
pub fn metrics(preds: &[Vec<u8>], targets: &[Vec<u8>]) -> Result<MetricsReport> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::validation(format!(
            "{} prediction rows vs {} target rows",
            preds.len(),
            targets.len()
        )));
    }
    let classes = targets[0].len();
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != classes || t.len() != classes {
            return Err(Error::validation("ragged prediction or target rows"));
        }
        if p.iter().chain(t).any(|&x| x > 1) {
            return Err(Error::validation("metrics need binary predictions and targets"));
        }
    }
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
            for (p, t) in preds.iter().zip(targets) {
                match (p[c], t[c]) {
                    (1, 1) => tp += 1,
                    (0, 0) => tn += 1,
                    (1, 0) => fp += 1,
                    _ => fneg += 1,
                }
            }
            let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
            let rates: Vec<f64> = [ratio(tp, tp + fneg), ratio(tn, tn + fp)]
                .into_iter()
                .flatten()
                .collect();
            let precision = ratio(tp, tp + fp).unwrap_or(0.0);
            let recall = ratio(tp, tp + fneg).unwrap_or(0.0);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                accuracy: (tp + tn) as f64 / preds.len() as f64,
                weighted_accuracy: rates.iter().sum::<f64>() / rates.len() as f64,
                f1,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / classes as f64;
    let average = ClassMetrics {
        accuracy: mean(|m| m.accuracy),
        weighted_accuracy: mean(|m| m.weighted_accuracy),
        f1: mean(|m| m.f1),
    };
    Ok(MetricsReport { per_class, average })
}
