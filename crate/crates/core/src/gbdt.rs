//! Feature-based confidence regressor: second-order gradient boosting of
//! regression trees under the logistic loss.
//!
//! Each boosting round grows `parallel_trees` trees on independent row
//! subsamples against the same gradient statistics; the round adds
//! `learning_rate` times their mean output to the margin. Missing feature
//! values are encoded as `NaN` and follow the default direction learned at
//! each split.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{DatasetCollection, Example};
use crate::scoring::normalize;

/// Column order used when training on prediction logs.
pub const FEATURE_NAMES: [&str; 5] = [
    "raw_confidence",
    "candidate_entropy",
    "input_perplexity",
    "input_length",
    "output_length",
];

/// Predictions are kept this far away from 0 and 1.
const MIN_PROB: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Normalized probability of the candidate.
    pub raw_confidence: f64,
    /// Entropy (nats) of the normalized distribution over the candidate set.
    pub candidate_entropy: f64,
    /// `exp` of the mean negative input token log-prob.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_perplexity: Option<f64>,
    /// Whitespace tokens of the input.
    pub input_length: usize,
    /// Whitespace tokens of the candidate.
    pub output_length: usize,
}

impl FeatureVector {
    /// Value of a named feature; `NaN` marks a missing value.
    pub fn value(&self, name: &str) -> Result<f64> {
        Ok(match name {
            "raw_confidence" => self.raw_confidence,
            "candidate_entropy" => self.candidate_entropy,
            "input_perplexity" => self.input_perplexity.unwrap_or(f64::NAN),
            "input_length" => self.input_length as f64,
            "output_length" => self.output_length as f64,
            other => return Err(Error::UnknownFeature(other.to_string())),
        })
    }

    pub fn to_row(&self, names: &[String]) -> Result<Vec<f64>> {
        names.iter().map(|n| self.value(n)).collect()
    }
}

/// `-Σ p ln p`, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// One feature vector per candidate of `example`.
pub fn extract_features(example: &Example) -> Vec<FeatureVector> {
    let scores = normalize(example);
    let h = entropy(&scores.probs);
    let perplexity = example
        .input_token_log_probs
        .as_ref()
        .filter(|lps| !lps.is_empty())
        .map(|lps| (-lps.iter().sum::<f64>() / lps.len() as f64).exp());
    let input_length = example.input_text.split_whitespace().count();
    example
        .candidates
        .iter()
        .zip(&scores.probs)
        .map(|(c, p)| FeatureVector {
            raw_confidence: *p,
            candidate_entropy: h,
            input_perplexity: perplexity,
            input_length,
            output_length: c.text.split_whitespace().count(),
        })
        .collect()
}

/// Stored features when every candidate has them, extracted ones otherwise.
pub fn example_features(example: &Example) -> Vec<FeatureVector> {
    let stored: Option<Vec<FeatureVector>> = example.candidates.iter().map(|c| c.features.clone()).collect();
    match stored {
        Some(f) if !f.is_empty() => f,
        _ => extract_features(example),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub max_depth: usize,
    pub parallel_trees: usize,
    pub subsample: f64,
    pub learning_rate: f64,
    pub num_rounds: usize,
    pub l2_leaf_reg: f64,
    /// Initial margin, in log-odds.
    pub base_score: f64,
    pub min_split_gain: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            max_depth: 4,
            parallel_trees: 5,
            subsample: 0.8,
            learning_rate: 0.1,
            num_rounds: 100,
            l2_leaf_reg: 1.0,
            base_score: 0.0,
            min_split_gain: 0.0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        if self.parallel_trees == 0 {
            return Err(Error::param("parallel_trees", "must be >= 1"));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::param("subsample", format!("{} is outside (0, 1]", self.subsample)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be finite and > 0"));
        }
        if !(self.l2_leaf_reg >= 0.0 && self.l2_leaf_reg.is_finite()) {
            return Err(Error::param("l2_leaf_reg", "must be finite and >= 0"));
        }
        if !self.base_score.is_finite() {
            return Err(Error::param("base_score", "must be finite"));
        }
        if !(self.min_split_gain >= 0.0 && self.min_split_gain.is_finite()) {
            return Err(Error::param("min_split_gain", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        /// Direction taken by a missing value.
        default_left: bool,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

/// Binary tree stored as a node array rooted at index 0. A row goes left when
/// its value is `< threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn leaf(weight: f64) -> Self {
        RegressionTree {
            nodes: vec![Node::Leaf { weight }],
        }
    }

    /// Index of the leaf `row` lands in.
    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                } => {
                    let v = row[*feature];
                    let go_left = if v.is_nan() { *default_left } else { v < *threshold };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            Node::Leaf { weight } => weight,
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub params: GbdtParams,
    pub seed: u64,
    pub feature_names: Vec<String>,
    /// One entry per boosting round, each holding its parallel trees.
    pub rounds: Vec<Vec<RegressionTree>>,
}

pub fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(MIN_PROB, 1.0 - MIN_PROB)
}

/// Logistic loss `ln(1 + e^m) - y m`.
fn logistic_loss(margin: f64, label: f64) -> f64 {
    let softplus = if margin > 0.0 {
        margin + (-margin).exp().ln_1p()
    } else {
        margin.exp().ln_1p()
    };
    softplus - label * margin
}

fn round_output(trees: &[RegressionTree], row: &[f64]) -> f64 {
    trees.iter().map(|t| t.predict(row)).sum::<f64>() / trees.len() as f64
}

impl GbdtModel {
    /// Log-odds for a dense row in `feature_names` order.
    pub fn margin(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.feature_names.len() {
            return Err(Error::FeatureCount {
                expected: self.feature_names.len(),
                got: row.len(),
            });
        }
        let lr = self.params.learning_rate;
        Ok(self
            .rounds
            .iter()
            .fold(self.params.base_score, |m, trees| m + lr * round_output(trees, row)))
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.margin(row)?))
    }

    /// Calibrated confidence for one candidate.
    pub fn predict(&self, features: &FeatureVector) -> Result<f64> {
        self.predict_row(&features.to_row(&self.feature_names)?)
    }
}

/// Dense training matrix with `NaN` for missing values and 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl TrainingData {
    /// One row per candidate, labelled by its gold flag.
    pub fn from_examples<'a, I>(examples: I) -> TrainingData
    where
        I: IntoIterator<Item = &'a Example>,
    {
        let feature_names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for ex in examples {
            for (fv, c) in example_features(ex).iter().zip(&ex.candidates) {
                rows.push(fv.to_row(&feature_names).expect("built-in feature names"));
                labels.push(c.is_gold);
            }
        }
        TrainingData {
            feature_names,
            rows,
            labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtFit {
    pub model: GbdtModel,
    /// Mean training logistic loss before boosting, then after each round.
    pub training_loss: Vec<f64>,
}

struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
}

struct TreeBuilder<'a> {
    rows: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbdtParams,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.params.l2_leaf_reg;
        if denom > 0.0 {
            g * g / denom
        } else {
            0.0
        }
    }

    fn leaf_weight(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.params.l2_leaf_reg;
        if denom > 0.0 {
            -g / denom
        } else {
            0.0
        }
    }

    fn sums(&self, members: &[usize]) -> (f64, f64) {
        members
            .iter()
            .fold((0.0, 0.0), |(g, h), &i| (g + self.grad[i], h + self.hess[i]))
    }

    /// Best split over all features; ties keep the lowest feature index and
    /// then the lowest threshold.
    fn best_split(&self, members: &[usize], g_total: f64, h_total: f64) -> Option<SplitCandidate> {
        let n_features = self.rows[members[0]].len();
        let parent = self.score(g_total, h_total);
        let mut best: Option<SplitCandidate> = None;
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(members.len());
        for f in 0..n_features {
            sorted.clear();
            let (mut g_miss, mut h_miss) = (0.0, 0.0);
            for &i in members {
                let v = self.rows[i][f];
                if v.is_nan() {
                    g_miss += self.grad[i];
                    h_miss += self.hess[i];
                } else {
                    sorted.push((v, i));
                }
            }
            if sorted.len() < 2 {
                continue;
            }
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let has_missing = sorted.len() < members.len();
            let g_present = g_total - g_miss;
            let h_present = h_total - h_miss;
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..sorted.len() - 1 {
                let i = sorted[k].1;
                gl += self.grad[i];
                hl += self.hess[i];
                let (a, b) = (sorted[k].0, sorted[k + 1].0);
                if a == b {
                    continue;
                }
                let mid = a + (b - a) / 2.0;
                let threshold = if mid > a && mid <= b { mid } else { b };
                let (gr, hr) = (g_present - gl, h_present - hl);
                let directions: &[bool] = if has_missing { &[true, false] } else { &[true] };
                for &default_left in directions {
                    let (gl2, hl2, gr2, hr2) = if default_left {
                        (gl + g_miss, hl + h_miss, gr, hr)
                    } else {
                        (gl, hl, gr + g_miss, hr + h_miss)
                    };
                    let gain = 0.5 * (self.score(gl2, hl2) + self.score(gr2, hr2) - parent);
                    if gain > self.params.min_split_gain && best.as_ref().is_none_or(|b| gain > b.gain) {
                        best = Some(SplitCandidate {
                            gain,
                            feature: f,
                            threshold,
                            default_left,
                        });
                    }
                }
            }
        }
        best
    }

    fn grow(&mut self, members: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let (g, h) = self.sums(&members);
        self.nodes.push(Node::Leaf {
            weight: self.leaf_weight(g, h),
        });
        if depth >= self.params.max_depth || members.len() < 2 {
            return id;
        }
        let Some(split) = self.best_split(&members, g, h) else {
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&i| {
            let v = self.rows[i][split.feature];
            if v.is_nan() {
                split.default_left
            } else {
                v < split.threshold
            }
        });
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            default_left: split.default_left,
            left,
            right,
        };
        id
    }
}

/// Trains the boosted ensemble. Bit-deterministic in (data order, params, seed).
pub fn fit(data: &TrainingData, params: &GbdtParams, seed: u64) -> Result<GbdtFit> {
    params.validate()?;
    let n = data.rows.len();
    if data.labels.len() != n {
        return Err(Error::param("labels", format!("{} labels for {n} rows", data.labels.len())));
    }
    let width = data.feature_names.len();
    if let Some(row) = data.rows.iter().find(|r| r.len() != width) {
        return Err(Error::FeatureCount {
            expected: width,
            got: row.len(),
        });
    }
    let positives = data.labels.iter().filter(|l| **l).count();
    if n < 2 || positives == 0 || positives == n {
        return Err(Error::SingleLabel);
    }
    let y: Vec<f64> = data.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample_size = ((n as f64 * params.subsample).round() as usize).clamp(1, n);
    let mut margins = vec![params.base_score; n];
    let mean_loss =
        |m: &[f64]| m.iter().zip(&y).map(|(m, y)| logistic_loss(*m, *y)).sum::<f64>() / n as f64;
    let mut training_loss = vec![mean_loss(&margins)];
    let mut rounds = Vec::with_capacity(params.num_rounds);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for _ in 0..params.num_rounds {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = p - y[i];
            hess[i] = p * (1.0 - p);
        }
        let mut trees = Vec::with_capacity(params.parallel_trees);
        for _ in 0..params.parallel_trees {
            let members: Vec<usize> = if sample_size == n {
                (0..n).collect()
            } else {
                let mut m = index::sample(&mut rng, n, sample_size).into_vec();
                m.sort_unstable();
                m
            };
            let mut builder = TreeBuilder {
                rows: &data.rows,
                grad: &grad,
                hess: &hess,
                params,
                nodes: Vec::new(),
            };
            builder.grow(members, 0);
            trees.push(RegressionTree { nodes: builder.nodes });
        }
        for (m, row) in margins.iter_mut().zip(&data.rows) {
            *m += params.learning_rate * round_output(&trees, row);
        }
        rounds.push(trees);
        training_loss.push(mean_loss(&margins));
    }
    Ok(GbdtFit {
        model: GbdtModel {
            params: params.clone(),
            seed,
            feature_names: data.feature_names.clone(),
            rounds,
        },
        training_loss,
    })
}

/// Attaches the model's confidence to every candidate. Confidences are not
/// renormalized over the candidate set.
pub fn calibrate_collection(model: &GbdtModel, collection: &DatasetCollection) -> Result<DatasetCollection> {
    collection.try_map(|ex| {
        let mut out = ex.clone();
        for (c, fv) in out.candidates.iter_mut().zip(example_features(ex)) {
            c.confidence = Some(model.predict(&fv)?);
        }
        Ok(out)
    })
}
