//! Prediction-log data model and its JSONL encoding.
//!
//! A log holds one [`Example`] per line. Each example carries the candidate
//! set scored by a language model, with sequence log-probabilities in nats.
//! Unknown fields are kept in `extra` maps so that files written by newer
//! producers survive a read/write cycle unchanged.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::gbdt::FeatureVector;

/// Allowed gap between a candidate's `log_prob` and the sum of its token log-probs.
pub const TOKEN_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    MultipleChoice,
    Extractive,
}

/// One answer option for a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    /// Sequence log-probability in nats.
    pub log_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_log_probs: Option<Vec<f64>>,
    #[serde(default)]
    pub is_gold: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrase_group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureVector>,
    /// Calibrated confidence written by `apply`. When every candidate of an
    /// example carries one, it replaces the normalized probability downstream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Candidate {
    pub fn new(text: impl Into<String>, log_prob: f64) -> Self {
        Candidate {
            text: text.into(),
            log_prob,
            token_log_probs: None,
            is_gold: false,
            paraphrase_group: None,
            features: None,
            confidence: None,
            extra: Map::new(),
        }
    }

    pub fn gold(mut self, is_gold: bool) -> Self {
        self.is_gold = is_gold;
        self
    }

    /// Key of the paraphrase group this candidate belongs to; ungrouped
    /// candidates form a group named after their own text.
    pub fn group_key(&self) -> &str {
        self.paraphrase_group.as_deref().unwrap_or(&self.text)
    }
}

/// One question together with its scored candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    #[serde(rename = "dataset")]
    pub dataset_id: String,
    pub split: Split,
    pub format: Format,
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_token_log_probs: Option<Vec<f64>>,
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented_from: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        dataset_id: impl Into<String>,
        split: Split,
        format: Format,
        input_text: impl Into<String>,
        candidates: Vec<Candidate>,
    ) -> Self {
        Example {
            id: id.into(),
            dataset_id: dataset_id.into(),
            split,
            format,
            input_text: input_text.into(),
            gold_answers: Vec::new(),
            input_token_log_probs: None,
            candidates,
            augmented_from: None,
            extra: Map::new(),
        }
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.log_prob).collect()
    }

    pub fn has_gold(&self) -> bool {
        self.candidates.iter().any(|c| c.is_gold)
    }

    /// Checks every per-example invariant of the log format.
    pub fn validate(&self) -> Result<()> {
        let id = self.id.as_str();
        if id.is_empty() {
            return Err(Error::invalid("<empty>", "id", "must not be empty"));
        }
        if self.input_text.trim().is_empty() {
            return Err(Error::invalid(id, "input", "must not be blank"));
        }
        if self.candidates.is_empty() {
            return Err(Error::invalid(id, "candidates", "at least one candidate is required"));
        }
        if let Some(lps) = &self.input_token_log_probs {
            if let Some(bad) = lps.iter().find(|v| !(v.is_finite() && **v <= 0.0)) {
                return Err(Error::invalid(
                    id,
                    "input_token_log_probs",
                    format!("{bad} is not a finite value <= 0"),
                ));
            }
        }
        for (i, c) in self.candidates.iter().enumerate() {
            let field = |name: &str| format!("candidates[{i}].{name}");
            if c.text.trim().is_empty() {
                return Err(Error::invalid(id, &field("text"), "must not be blank"));
            }
            if !c.log_prob.is_finite() || c.log_prob > 0.0 {
                return Err(Error::invalid(
                    id,
                    &field("log_prob"),
                    format!("{} is not a finite value <= 0", c.log_prob),
                ));
            }
            if let Some(tokens) = &c.token_log_probs {
                if let Some(bad) = tokens.iter().find(|v| !(v.is_finite() && **v <= 0.0)) {
                    return Err(Error::invalid(
                        id,
                        &field("token_log_probs"),
                        format!("{bad} is not a finite value <= 0"),
                    ));
                }
                let sum: f64 = tokens.iter().sum();
                if (c.log_prob - sum).abs() > TOKEN_SUM_TOLERANCE {
                    return Err(Error::invalid(
                        id,
                        &field("token_log_probs"),
                        format!("sum {sum} disagrees with log_prob {}", c.log_prob),
                    ));
                }
            }
            if let Some(conf) = c.confidence {
                if !(0.0..=1.0).contains(&conf) {
                    return Err(Error::invalid(id, &field("confidence"), format!("{conf} is outside [0, 1]")));
                }
            }
        }
        match self.format {
            Format::MultipleChoice => {
                let golds = self.candidates.iter().filter(|c| c.is_gold).count();
                if golds != 1 {
                    return Err(Error::invalid(
                        id,
                        "is_gold",
                        format!("multiple-choice example needs exactly one gold candidate, found {golds}"),
                    ));
                }
            }
            Format::Extractive => {
                if self.gold_answers.is_empty() {
                    return Err(Error::invalid(
                        id,
                        "gold_answers",
                        "extractive example needs at least one gold answer",
                    ));
                }
            }
        }
        let mut seen = HashSet::new();
        for c in &self.candidates {
            if !seen.insert((c.group_key(), c.text.as_str())) {
                return Err(Error::invalid(
                    id,
                    "candidates",
                    format!("duplicate candidate text `{}` in group `{}`", c.text, c.group_key()),
                ));
            }
        }
        Ok(())
    }
}

/// Lowercase, drop ASCII punctuation and the articles a/an/the, and collapse
/// whitespace. Used for exact-match correctness of extracted spans.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Marks each candidate gold iff its normalized text matches a normalized gold
/// answer. Multiple-choice examples are returned unchanged.
pub fn mark_gold_extractive(example: &Example, gold_answers: &[String]) -> Example {
    let mut out = example.clone();
    if example.format != Format::Extractive {
        return out;
    }
    let golds: HashSet<String> = gold_answers.iter().map(|g| normalize_answer(g)).collect();
    for c in &mut out.candidates {
        c.is_gold = golds.contains(&normalize_answer(&c.text));
    }
    out
}

/// All examples of a log, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetCollection {
    examples: Vec<Example>,
}

impl DatasetCollection {
    /// Validates each example and the per-(dataset, split) id uniqueness.
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let mut ids = HashSet::new();
        for ex in &examples {
            ex.validate()?;
            if !ids.insert((ex.dataset_id.as_str(), ex.split, ex.id.as_str())) {
                return Err(Error::invalid(
                    &ex.id,
                    "id",
                    format!("duplicate id in dataset `{}` split `{}`", ex.dataset_id, ex.split),
                ));
            }
        }
        Ok(DatasetCollection { examples })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    /// Examples of one split, keeping file order.
    pub fn split(&self, split: Split) -> DatasetCollection {
        DatasetCollection {
            examples: self.examples.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.examples.iter().any(|e| e.split == split)
    }

    /// Examples grouped by dataset id, datasets in sorted order.
    pub fn by_dataset(&self) -> BTreeMap<&str, Vec<&Example>> {
        let mut groups: BTreeMap<&str, Vec<&Example>> = BTreeMap::new();
        for ex in &self.examples {
            groups.entry(ex.dataset_id.as_str()).or_default().push(ex);
        }
        groups
    }

    /// Replaces every example through `f`, re-validating the result.
    pub fn try_map<F>(&self, f: F) -> Result<DatasetCollection>
    where
        F: FnMut(&Example) -> Result<Example>,
    {
        let examples = self.examples.iter().map(f).collect::<Result<Vec<_>>>()?;
        DatasetCollection::new(examples)
    }
}

impl<'a> IntoIterator for &'a DatasetCollection {
    type Item = &'a Example;
    type IntoIter = std::slice::Iter<'a, Example>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

/// Parses a JSONL prediction log. Blank lines are skipped; extractive
/// examples get their gold flags recomputed from `gold_answers`.
pub fn parse_log<R: BufRead>(reader: R) -> Result<DatasetCollection> {
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: "<log>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|source| Error::Json { line: idx + 1, source })?;
        let ex = match ex.format {
            Format::Extractive => mark_gold_extractive(&ex, &ex.gold_answers),
            Format::MultipleChoice => ex,
        };
        examples.push(ex);
    }
    DatasetCollection::new(examples)
}

/// Writes one compact JSON object per line.
pub fn write_log<W: Write>(collection: &DatasetCollection, mut writer: W) -> Result<()> {
    for ex in collection {
        let line = serde_json::to_string(ex)?;
        writeln!(writer, "{line}").map_err(|source| Error::Io {
            path: "<log>".into(),
            source,
        })?;
    }
    Ok(())
}
