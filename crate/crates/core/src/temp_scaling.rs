//! Temperature scaling over candidate log-probabilities.
//!
//! The temperature is fitted by minimizing the mean negative log-likelihood of
//! the gold candidates on a fitting split, searching over `ln τ` with a
//! golden-section search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::Example;
use crate::scoring::{argmax, log_sum_exp, softmax, NormalizedScores};

pub const DEFAULT_TAU_MIN: f64 = 0.01;
pub const DEFAULT_TAU_MAX: f64 = 100.0;
/// Search tolerance on `ln τ`.
pub const LOG_TAU_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub tau: f64,
    pub fit_nll: f64,
    pub n_used: usize,
    pub n_skipped: usize,
    /// Set when the temperature was fitted on the evaluation split.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub oracle: bool,
    #[serde(skip)]
    pub nll_at_one: f64,
    #[serde(skip)]
    pub search_trace: Vec<(f64, f64)>,
}

impl TemperatureModel {
    /// A model that applies `tau` without having been fitted.
    pub fn fixed(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::param("tau", format!("{tau} must be finite and > 0")));
        }
        Ok(TemperatureModel {
            tau,
            fit_nll: f64::NAN,
            n_used: 0,
            n_skipped: 0,
            oracle: false,
            nll_at_one: f64::NAN,
            search_trace: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for TemperatureBounds {
    fn default() -> Self {
        TemperatureBounds {
            min: DEFAULT_TAU_MIN,
            max: DEFAULT_TAU_MAX,
        }
    }
}

impl TemperatureBounds {
    fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.min < self.max && self.max.is_finite()) {
            return Err(Error::param(
                "temperature bounds",
                format!("need 0 < min < max, got [{}, {}]", self.min, self.max),
            ));
        }
        Ok(())
    }
}

/// Log-probs of one example plus which candidates are gold.
#[derive(Debug, Clone)]
pub struct FitRow {
    pub logits: Vec<f64>,
    pub gold: Vec<usize>,
}

impl FitRow {
    pub fn from_example(ex: &Example) -> Option<Self> {
        let gold: Vec<usize> = ex
            .candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_gold)
            .map(|(i, _)| i)
            .collect();
        (!gold.is_empty()).then(|| FitRow {
            logits: ex.log_probs(),
            gold,
        })
    }

    /// `-ln Σ_{gold} softmax(logits / τ)`.
    fn nll(&self, tau: f64, scratch: &mut Vec<f64>) -> f64 {
        scratch.clear();
        scratch.extend(self.logits.iter().map(|z| z / tau));
        let total = log_sum_exp(scratch);
        let gold = if self.gold.len() == 1 {
            scratch[self.gold[0]]
        } else {
            let g: Vec<f64> = self.gold.iter().map(|&i| scratch[i]).collect();
            log_sum_exp(&g)
        };
        total - gold
    }
}

/// Mean NLL of the gold candidates at temperature `tau`.
pub fn mean_nll(rows: &[FitRow], tau: f64) -> f64 {
    let mut scratch = Vec::new();
    let sum: f64 = rows.iter().map(|r| r.nll(tau, &mut scratch)).sum();
    sum / rows.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenResult {
    pub x: f64,
    pub fx: f64,
    pub iterations: usize,
    pub trace: Vec<(f64, f64)>,
}

/// Golden-section minimization of a unimodal `f` on `[lo, hi]`, stopping when
/// the bracket is narrower than `tol`.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> GoldenResult {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut trace = Vec::new();
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    trace.push((x1, f1));
    trace.push((x2, f2));
    let mut iterations = 0;
    while hi - lo > tol {
        iterations += 1;
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
            trace.push((x1, f1));
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
            trace.push((x2, f2));
        }
    }
    let (x, fx) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    GoldenResult {
        x,
        fx,
        iterations,
        trace,
    }
}

/// Fits the temperature on `examples`. Examples without a gold candidate are
/// skipped and counted.
pub fn fit_temperature<'a, I>(examples: I, bounds: TemperatureBounds) -> Result<TemperatureModel>
where
    I: IntoIterator<Item = &'a Example>,
{
    bounds.validate()?;
    let mut rows = Vec::new();
    let mut n_skipped = 0;
    for ex in examples {
        match FitRow::from_example(ex) {
            Some(r) => rows.push(r),
            None => n_skipped += 1,
        }
    }
    if rows.is_empty() {
        return Err(Error::NoUsableExamples { skipped: n_skipped });
    }
    let objective = |log_tau: f64| mean_nll(&rows, log_tau.exp());
    let result = golden_section(objective, bounds.min.ln(), bounds.max.ln(), LOG_TAU_TOLERANCE);
    let nll_at_one = mean_nll(&rows, 1.0);
    let in_bounds = bounds.min <= 1.0 && 1.0 <= bounds.max;
    let (tau, fit_nll) = if in_bounds && nll_at_one < result.fx {
        (1.0, nll_at_one)
    } else {
        (result.x.exp(), result.fx)
    };
    Ok(TemperatureModel {
        tau,
        fit_nll,
        n_used: rows.len(),
        n_skipped,
        oracle: false,
        nll_at_one,
        search_trace: result.trace.into_iter().map(|(lt, v)| (lt.exp(), v)).collect(),
    })
}

/// `softmax(log_probs / τ)`; the predicted index is that of the unscaled
/// log-probs, which scaling by a positive constant cannot change.
pub fn apply_temperature(example: &Example, model: &TemperatureModel) -> NormalizedScores {
    let log_probs = example.log_probs();
    let scaled: Vec<f64> = log_probs.iter().map(|z| z / model.tau).collect();
    NormalizedScores {
        probs: softmax(&scaled),
        predicted_index: argmax(&log_probs),
    }
}
