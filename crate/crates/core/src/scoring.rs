//! Candidate normalization, prediction, accuracy and the candidate-set
//! fine-tuning losses with their exact gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::records::{DatasetCollection, Example};

/// Default hinge margin for [`margin_loss`].
pub const DEFAULT_MARGIN: f64 = 1.0;

/// `ln Σ exp(x_i)` with the max shift. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax via the log-sum-exp shift.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|x| (x - lse).exp()).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Candidate probabilities normalized over the candidate set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalizedScores {
    pub probs: Vec<f64>,
    pub predicted_index: usize,
}

impl NormalizedScores {
    pub fn from_logits(logits: &[f64]) -> Self {
        NormalizedScores {
            probs: softmax(logits),
            predicted_index: argmax(logits),
        }
    }
}

/// Normalized probability of every candidate of `example`.
pub fn normalize(example: &Example) -> NormalizedScores {
    NormalizedScores::from_logits(&example.log_probs())
}

/// The confidences downstream metrics consume for one example: calibrated
/// values when every candidate carries one, normalized probabilities
/// otherwise. Calibrated values are used as-is, without renormalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Confidences {
    pub values: Vec<f64>,
    pub predicted_index: usize,
}

pub fn confidences(example: &Example) -> Confidences {
    let calibrated: Option<Vec<f64>> = example.candidates.iter().map(|c| c.confidence).collect();
    match calibrated {
        Some(values) if !values.is_empty() => {
            let predicted_index = argmax(&values);
            Confidences { values, predicted_index }
        }
        _ => {
            let n = normalize(example);
            Confidences {
                values: n.probs,
                predicted_index: n.predicted_index,
            }
        }
    }
}

/// Whether the predicted candidate of `example` is gold.
pub fn is_correct(example: &Example) -> bool {
    let conf = confidences(example);
    example.candidates[conf.predicted_index].is_gold
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub per_dataset: BTreeMap<String, f64>,
    pub macro_accuracy: f64,
}

/// Per-dataset accuracy and its unweighted mean across datasets.
pub fn accuracy(collection: &DatasetCollection) -> Result<AccuracyReport> {
    if collection.is_empty() {
        return Err(Error::EmptyCollection);
    }
    let per_dataset: BTreeMap<String, f64> = collection
        .by_dataset()
        .into_iter()
        .map(|(name, examples)| {
            let correct = examples.iter().filter(|e| is_correct(e)).count();
            (name.to_string(), correct as f64 / examples.len() as f64)
        })
        .collect();
    let macro_accuracy = per_dataset.values().sum::<f64>() / per_dataset.len() as f64;
    Ok(AccuracyReport {
        per_dataset,
        macro_accuracy,
    })
}

/// Loss value and its gradient with respect to each candidate logit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossResult {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

fn check_gold(logits: &[f64], gold_index: usize) -> Result<()> {
    if gold_index >= logits.len() {
        return Err(Error::GoldIndexOutOfRange {
            index: gold_index,
            len: logits.len(),
        });
    }
    Ok(())
}

/// Negative log-likelihood of the gold candidate under a softmax over the
/// candidate logits. Gradient is `softmax(logits) - onehot(gold)`.
pub fn softmax_loss(logits: &[f64], gold_index: usize) -> Result<LossResult> {
    check_gold(logits, gold_index)?;
    let lse = log_sum_exp(logits);
    let loss = (lse - logits[gold_index]).max(0.0);
    let mut gradient: Vec<f64> = logits.iter().map(|x| (x - lse).exp()).collect();
    gradient[gold_index] -= 1.0;
    // Make the components sum to zero exactly: gold gets minus the rest.
    let others: f64 = gradient
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != gold_index)
        .map(|(_, g)| g)
        .sum();
    gradient[gold_index] = -others;
    Ok(LossResult { loss, gradient })
}

/// Summed hinge `Σ_{i≠gold} max(0, margin + logit_i - logit_gold)`.
///
/// Terms exactly at the kink count as inactive and contribute no gradient.
pub fn margin_loss(logits: &[f64], gold_index: usize, margin: f64) -> Result<LossResult> {
    check_gold(logits, gold_index)?;
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::param("margin", format!("{margin} must be finite and >= 0")));
    }
    let gold = logits[gold_index];
    let mut loss = 0.0;
    let mut gradient = vec![0.0; logits.len()];
    let mut active = 0.0;
    for (i, &z) in logits.iter().enumerate() {
        if i == gold_index {
            continue;
        }
        let term = margin + z - gold;
        if term > 0.0 {
            loss += term;
            gradient[i] = 1.0;
            active += 1.0;
        }
    }
    gradient[gold_index] = -active;
    Ok(LossResult { loss, gradient })
}
