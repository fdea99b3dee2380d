//! Confidence bucketing, expected calibration error, reliability diagrams and
//! the paraphrase-sensitivity analysis.
//!
//! Bucket `m` (1-based) of `M` holds confidences in `((m-1)/M, m/M]`; a
//! confidence of exactly 0 goes to bucket 1. Boundaries are the `f64`
//! quotients `m as f64 / M as f64`, so membership is exact.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::records::{DatasetCollection, Example};
use crate::scoring::{self, confidences};
use crate::variants;

pub const DEFAULT_BUCKETS: usize = 10;

/// Absolute confidence change that counts as a calibration improvement.
pub const SENSITIVITY_THRESHOLD: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemMode {
    /// One item per candidate, scored by its own confidence and gold flag.
    AllCandidates,
    /// One item per example, from the predicted candidate only.
    PredictionsOnly,
}

impl ItemMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemMode::AllCandidates => "all_candidates",
            ItemMode::PredictionsOnly => "predictions_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    /// 1-based bucket number.
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Absent for empty buckets.
    pub avg_confidence: Option<f64>,
    pub avg_accuracy: Option<f64>,
}

fn check_buckets(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::param("buckets", "must be >= 1"));
    }
    Ok(())
}

/// Zero-based bucket of `confidence` among `m` buckets.
pub fn bucket_of(confidence: f64, m: usize) -> Result<usize> {
    check_buckets(m)?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::ConfidenceOutOfRange(confidence));
    }
    if confidence == 0.0 {
        return Ok(0);
    }
    let mf = m as f64;
    let upper = |k: usize| k as f64 / mf;
    // Start from the arithmetic guess, then correct against the exact bounds.
    let mut k = ((confidence * mf).ceil() as usize).clamp(1, m);
    while k > 1 && confidence <= upper(k - 1) {
        k -= 1;
    }
    while k < m && confidence > upper(k) {
        k += 1;
    }
    Ok(k - 1)
}

/// Groups `(confidence, correct)` items into `m` equal-width buckets.
pub fn bucketize(items: &[(f64, bool)], m: usize) -> Result<Vec<Bucket>> {
    check_buckets(m)?;
    let mut count = vec![0usize; m];
    let mut conf_sum = vec![0.0f64; m];
    let mut correct = vec![0usize; m];
    for &(c, ok) in items {
        let b = bucket_of(c, m)?;
        count[b] += 1;
        conf_sum[b] += c;
        if ok {
            correct[b] += 1;
        }
    }
    Ok((0..m)
        .map(|b| {
            let n = count[b];
            Bucket {
                index: b + 1,
                lower: b as f64 / m as f64,
                upper: (b + 1) as f64 / m as f64,
                count: n,
                avg_confidence: (n > 0).then(|| conf_sum[b] / n as f64),
                avg_accuracy: (n > 0).then(|| correct[b] as f64 / n as f64),
            }
        })
        .collect())
}

fn ece_of_buckets(buckets: &[Bucket], n: usize) -> f64 {
    buckets
        .iter()
        .filter_map(|b| {
            let (conf, acc) = (b.avg_confidence?, b.avg_accuracy?);
            Some(b.count as f64 / n as f64 * (acc - conf).abs())
        })
        .sum()
}

/// Expected calibration error over `m` buckets.
pub fn ece(items: &[(f64, bool)], m: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyItems);
    }
    let buckets = bucketize(items, m)?;
    Ok(ece_of_buckets(&buckets, items.len()))
}

/// Calibration items contributed by one example.
pub fn example_items(example: &Example, mode: ItemMode) -> Vec<(f64, bool)> {
    let conf = confidences(example);
    match mode {
        ItemMode::AllCandidates => conf
            .values
            .iter()
            .zip(&example.candidates)
            .map(|(v, c)| (*v, c.is_gold))
            .collect(),
        ItemMode::PredictionsOnly => {
            let i = conf.predicted_index;
            vec![(conf.values[i], example.candidates[i].is_gold)]
        }
    }
}

pub fn collection_items<'a, I>(examples: I, mode: ItemMode) -> Vec<(f64, bool)>
where
    I: IntoIterator<Item = &'a Example>,
{
    examples.into_iter().flat_map(|e| example_items(e, mode)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub dataset: String,
    pub mode: ItemMode,
    pub buckets_m: usize,
    pub n: usize,
    pub buckets: Vec<Bucket>,
    pub ece: f64,
    /// Fraction of items per bucket.
    pub histogram: Vec<f64>,
}

impl CalibrationReport {
    pub fn from_items(dataset: &str, items: &[(f64, bool)], m: usize, mode: ItemMode) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyItems);
        }
        let buckets = bucketize(items, m)?;
        let n = items.len();
        let ece = ece_of_buckets(&buckets, n);
        let histogram = buckets.iter().map(|b| b.count as f64 / n as f64).collect();
        Ok(CalibrationReport {
            dataset: dataset.to_string(),
            mode,
            buckets_m: m,
            n,
            buckets,
            ece,
            histogram,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_dataset: Vec<CalibrationReport>,
    pub macro_ece: f64,
}

/// Per-dataset calibration reports and the unweighted mean ECE.
pub fn report(collection: &DatasetCollection, m: usize, mode: ItemMode) -> Result<EvalReport> {
    if collection.is_empty() {
        return Err(Error::EmptyCollection);
    }
    let per_dataset = collection
        .by_dataset()
        .into_iter()
        .map(|(name, examples)| {
            let items = collection_items(examples.iter().copied(), mode);
            CalibrationReport::from_items(name, &items, m, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let macro_ece = per_dataset.iter().map(|r| r.ece).sum::<f64>() / per_dataset.len() as f64;
    Ok(EvalReport { per_dataset, macro_ece })
}

/// CSV with one row per (dataset, bucket). Empty buckets leave the averages blank.
pub fn to_csv(report: &EvalReport) -> String {
    let mut out = String::from("dataset,mode,M,bucket,count,avg_conf,avg_acc,ece\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
    for r in &report.per_dataset {
        for b in &r.buckets {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.10}",
                csv_field(&r.dataset),
                r.mode.as_str(),
                r.buckets_m,
                b.index,
                b.count,
                fmt(b.avg_confidence),
                fmt(b.avg_accuracy),
                r.ece
            );
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const SVG_SIZE: f64 = 400.0;
const SVG_MARGIN: f64 = 50.0;

fn svg_frame(out: &mut String, title: &str, y_label: &str) {
    let w = SVG_SIZE + 2.0 * SVG_MARGIN;
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}" viewBox="0 0 {w} {w}">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{w}" height="{w}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="25" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    let (x0, y0) = (SVG_MARGIN, SVG_MARGIN + SVG_SIZE);
    let _ = writeln!(
        out,
        r#"<rect x="{SVG_MARGIN}" y="{SVG_MARGIN}" width="{SVG_SIZE}" height="{SVG_SIZE}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let x = x0 + t * SVG_SIZE;
        let y = y0 - t * SVG_SIZE;
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{t:.1}</text>"#,
            y0 + 15.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{t:.1}</text>"#,
            x0 - 5.0,
            y + 3.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">Confidence</text>"#,
        w / 2.0,
        y0 + 35.0
    );
    let _ = writeln!(
        out,
        r#"<text x="15" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        w / 2.0,
        w / 2.0,
        y_label
    );
}

/// Reliability diagram: one bar per bucket at height acc(B_m), drawn over the
/// identity diagonal.
pub fn reliability_svg(r: &CalibrationReport) -> String {
    let mut out = String::new();
    let title = format!("{} ({}, M={}) ECE={:.4}", r.dataset, r.mode.as_str(), r.buckets_m, r.ece);
    svg_frame(&mut out, &title, "Accuracy");
    let (x0, y0) = (SVG_MARGIN, SVG_MARGIN + SVG_SIZE);
    let width = SVG_SIZE / r.buckets_m as f64;
    for b in &r.buckets {
        let x = x0 + (b.index - 1) as f64 * width;
        if let Some(acc) = b.avg_accuracy {
            let h = acc * SVG_SIZE;
            let _ = writeln!(
                out,
                r#"<rect class="bar" x="{x:.2}" y="{:.2}" width="{width:.2}" height="{h:.2}" fill="steelblue" stroke="navy"/>"#,
                y0 - h
            );
        }
        if let Some(conf) = b.avg_confidence {
            let y = y0 - conf * SVG_SIZE;
            let _ = writeln!(
                out,
                r#"<line class="conf" x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="crimson" stroke-width="2"/>"#,
                x + width
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<line class="diagonal" x1="{x0}" y1="{y0}" x2="{}" y2="{SVG_MARGIN}" stroke="gray" stroke-dasharray="4 4"/>"#,
        x0 + SVG_SIZE
    );
    out.push_str("</svg>\n");
    out
}

/// Confidence histogram: fraction of items per bucket.
pub fn histogram_svg(r: &CalibrationReport) -> String {
    let mut out = String::new();
    let title = format!("{} ({}, M={}) n={}", r.dataset, r.mode.as_str(), r.buckets_m, r.n);
    svg_frame(&mut out, &title, "Ratio");
    let (x0, y0) = (SVG_MARGIN, SVG_MARGIN + SVG_SIZE);
    let width = SVG_SIZE / r.buckets_m as f64;
    for (i, ratio) in r.histogram.iter().enumerate() {
        let h = ratio * SVG_SIZE;
        let _ = writeln!(
            out,
            r#"<rect class="bar" x="{:.2}" y="{:.2}" width="{width:.2}" height="{h:.2}" fill="darkorange" stroke="saddlebrown"/>"#,
            x0 + i as f64 * width,
            y0 - h
        );
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityLabel {
    BetterCalibrated,
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateShift {
    pub dataset: String,
    pub example_id: String,
    pub candidate_index: usize,
    pub is_gold: bool,
    pub before: f64,
    pub after: f64,
    pub label: SensitivityLabel,
    /// Lexical diversity of the candidate's paraphrase set, if it has any tokens.
    pub diversity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub count: usize,
    pub mean_question_length: Option<f64>,
    pub mean_paraphrase_diversity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    /// Confidence shift counted as an improvement (absolute).
    pub threshold: f64,
    pub candidates: Vec<CandidateShift>,
    pub better_calibrated: GroupSummary,
    pub unchanged: GroupSummary,
}

/// Classifies a confidence shift for one candidate.
pub fn classify_shift(is_gold: bool, before: f64, after: f64) -> SensitivityLabel {
    // Absorb representation error so that e.g. 0.04 -> 0.24 counts.
    const EPS: f64 = 1e-12;
    let delta = after - before;
    let better = if is_gold {
        delta >= SENSITIVITY_THRESHOLD - EPS
    } else {
        delta <= -SENSITIVITY_THRESHOLD + EPS
    };
    if better {
        SensitivityLabel::BetterCalibrated
    } else {
        SensitivityLabel::Unchanged
    }
}

/// Unique whitespace tokens divided by total whitespace tokens across `texts`.
pub fn lexical_diversity<S: AsRef<str>>(texts: &[S]) -> Option<f64> {
    let tokens: Vec<&str> = texts.iter().flat_map(|t| t.as_ref().split_whitespace()).collect();
    if tokens.is_empty() {
        return None;
    }
    let unique: std::collections::HashSet<&str> = tokens.iter().copied().collect();
    Some(unique.len() as f64 / tokens.len() as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Compares candidate confidences before and after paraphrase aggregation.
///
/// `after` holds the paraphrase-expanded log: for each example of `before`
/// (matched by dataset, split and id) its paraphrase groups, in order of first
/// appearance, must line up one-to-one with `before`'s candidates.
pub fn paraphrase_sensitivity(before: &DatasetCollection, after: &DatasetCollection) -> Result<SensitivityReport> {
    let index: HashMap<(&str, crate::records::Split, &str), &Example> = after
        .iter()
        .map(|e| ((e.dataset_id.as_str(), e.split, e.id.as_str()), e))
        .collect();
    if before.len() != after.len() {
        return Err(Error::Misaligned(format!(
            "{} examples before, {} after",
            before.len(),
            after.len()
        )));
    }
    let mut shifts = Vec::new();
    let mut question_lengths = Vec::new();
    for ex in before {
        let other = index
            .get(&(ex.dataset_id.as_str(), ex.split, ex.id.as_str()))
            .ok_or_else(|| Error::Misaligned(format!("example `{}` missing from after", ex.id)))?;
        let (groups, scores) = variants::aggregate_paraphrases(other, true);
        if groups.len() != ex.candidates.len() {
            return Err(Error::Misaligned(format!(
                "example `{}`: {} candidates before, {} paraphrase groups after",
                ex.id,
                ex.candidates.len(),
                groups.len()
            )));
        }
        let before_conf = scoring::confidences(ex);
        let qlen = ex.input_text.split_whitespace().count() as f64;
        for (i, (cand, group)) in ex.candidates.iter().zip(&groups).enumerate() {
            let b = before_conf.values[i];
            let a = scores.probs[i];
            let texts: Vec<&str> = group.members.iter().map(|(t, _)| t.as_str()).collect();
            shifts.push(CandidateShift {
                dataset: ex.dataset_id.clone(),
                example_id: ex.id.clone(),
                candidate_index: i,
                is_gold: cand.is_gold,
                before: b,
                after: a,
                label: classify_shift(cand.is_gold, b, a),
                diversity: lexical_diversity(&texts),
            });
            question_lengths.push(qlen);
        }
    }
    let summarize = |label: SensitivityLabel| {
        let members: Vec<usize> = (0..shifts.len()).filter(|&i| shifts[i].label == label).collect();
        GroupSummary {
            count: members.len(),
            mean_question_length: mean(members.iter().map(|&i| question_lengths[i])),
            mean_paraphrase_diversity: mean(members.iter().filter_map(|&i| shifts[i].diversity)),
        }
    };
    let better_calibrated = summarize(SensitivityLabel::BetterCalibrated);
    let unchanged = summarize(SensitivityLabel::Unchanged);
    Ok(SensitivityReport {
        threshold: SENSITIVITY_THRESHOLD,
        candidates: shifts,
        better_calibrated,
        unchanged,
    })
}
