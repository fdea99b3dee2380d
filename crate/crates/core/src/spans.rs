//! Extractive-QA candidate generation.
//!
//! Spans are scored autoregressively by a [`TokenScorer`]. The first-token
//! distribution is restricted to tokens that occur in the passage; only the
//! top-R of those start span families, one family per occurrence, each
//! extended up to `max_len` tokens. After de-duplicating by surface text the
//! top-K spans by summed log-prob are kept.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageToken {
    pub id: TokenId,
    pub text: String,
}

impl PassageToken {
    pub fn new(id: TokenId, text: impl Into<String>) -> Self {
        PassageToken { id, text: text.into() }
    }
}

/// Builds passage tokens from strings, numbering distinct strings by first
/// occurrence.
pub fn tokens_from_strings<S: AsRef<str>>(texts: &[S]) -> Vec<PassageToken> {
    let mut ids: HashMap<&str, TokenId> = HashMap::new();
    texts
        .iter()
        .map(|t| {
            let t = t.as_ref();
            let next = ids.len() as TokenId;
            let id = *ids.entry(t).or_insert(next);
            PassageToken::new(id, t)
        })
        .collect()
}

/// Next-token log-probabilities of an autoregressive model.
///
/// `prefix` is the span generated so far (empty for the first token). Returns
/// `None` when the scorer has no value for `token`.
pub trait TokenScorer {
    fn log_prob(&self, input_text: &str, prefix: &[PassageToken], token: &PassageToken) -> Option<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanConfig {
    /// First tokens kept after masking to the passage.
    pub top_r: usize,
    /// Spans returned.
    pub top_k: usize,
    pub max_len: usize,
}

impl Default for SpanConfig {
    fn default() -> Self {
        SpanConfig {
            top_r: 10,
            top_k: 5,
            max_len: 20,
        }
    }
}

impl SpanConfig {
    pub fn validate(&self) -> Result<()> {
        let fields: [(&'static str, usize); 3] = [("R", self.top_r), ("K", self.top_k), ("max_len", self.max_len)];
        match fields.into_iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::param(name, "must be >= 1")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanCandidate {
    /// Index of the first passage token.
    pub start: usize,
    pub length: usize,
    pub text: String,
    pub log_prob: f64,
    /// Per-token scores; `log_prob` is their left-to-right sum.
    pub token_log_probs: Vec<f64>,
}

/// Surface text of a token run.
pub fn span_text(tokens: &[PassageToken]) -> String {
    tokens.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ")
}

fn missing(prefix: &[PassageToken], token: &PassageToken) -> Error {
    Error::ScorerMissing {
        token: token.text.clone(),
        prefix: span_text(prefix),
    }
}

/// Ranking order: higher log-prob, then earlier start, then shorter.
pub fn rank_order(a: &SpanCandidate, b: &SpanCandidate) -> std::cmp::Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then(a.start.cmp(&b.start))
        .then(a.length.cmp(&b.length))
}

/// Keeps the best-ranked span per surface text, then the top `k` overall.
pub fn dedup_and_rank(mut spans: Vec<SpanCandidate>, k: usize) -> Vec<SpanCandidate> {
    spans.sort_by(rank_order);
    let mut seen = std::collections::HashSet::new();
    spans.retain(|s| seen.insert(s.text.clone()));
    spans.truncate(k);
    spans
}

pub fn enumerate_spans<S: TokenScorer + ?Sized>(
    input_text: &str,
    passage: &[PassageToken],
    scorer: &S,
    config: &SpanConfig,
) -> Result<Vec<SpanCandidate>> {
    config.validate()?;
    if passage.is_empty() {
        return Err(Error::param("passage", "must contain at least one token"));
    }

    // First-token scores over distinct passage tokens.
    let mut first: BTreeMap<TokenId, f64> = BTreeMap::new();
    for tok in passage {
        if first.contains_key(&tok.id) {
            continue;
        }
        let lp = scorer.log_prob(input_text, &[], tok).ok_or_else(|| missing(&[], tok))?;
        first.insert(tok.id, lp);
    }
    let mut ranked: Vec<(TokenId, f64)> = first.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(config.top_r);

    let mut spans = Vec::new();
    for (id, first_lp) in ranked {
        for start in passage.iter().enumerate().filter(|(_, t)| t.id == id).map(|(i, _)| i) {
            let end = (start + config.max_len).min(passage.len());
            let mut token_log_probs = vec![first_lp];
            let mut log_prob = first_lp;
            spans.push(SpanCandidate {
                start,
                length: 1,
                text: span_text(&passage[start..start + 1]),
                log_prob,
                token_log_probs: token_log_probs.clone(),
            });
            for stop in start + 2..=end {
                let prefix = &passage[start..stop - 1];
                let tok = &passage[stop - 1];
                let lp = scorer.log_prob(input_text, prefix, tok).ok_or_else(|| missing(prefix, tok))?;
                log_prob += lp;
                token_log_probs.push(lp);
                spans.push(SpanCandidate {
                    start,
                    length: stop - start,
                    text: span_text(&passage[start..stop]),
                    log_prob,
                    token_log_probs: token_log_probs.clone(),
                });
            }
        }
    }
    Ok(dedup_and_rank(spans, config.top_k))
}

/// Separator between tokens in [`MockScorer`] continuation keys.
pub const KEY_SEPARATOR: char = '|';

/// Table-driven scorer keyed by token text.
///
/// `first_token` maps a token to its first-position log-prob; `continuations`
/// maps `"t1|...|tn|token"` (the prefix followed by the next token) to its
/// log-prob. The input text is ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScorer {
    pub first_token: BTreeMap<String, f64>,
    pub continuations: BTreeMap<String, f64>,
}

impl MockScorer {
    pub fn continuation_key(prefix: &[&str], token: &str) -> String {
        let mut key = prefix.join(&KEY_SEPARATOR.to_string());
        key.push(KEY_SEPARATOR);
        key.push_str(token);
        key
    }

    /// Checks that log-probs are `<= 0` and that each next-token distribution
    /// has mass at most `1 + 1e-6`.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, v: f64| {
            Error::param("scorer", format!("log-prob for `{key}` is {v}, expected a value <= 0"))
        };
        for (k, v) in self.first_token.iter().chain(&self.continuations) {
            if v.is_nan() || *v > 0.0 {
                return Err(bad(k, *v));
            }
        }
        let first_mass: f64 = self.first_token.values().map(|v| v.exp()).sum();
        let mut mass: BTreeMap<&str, f64> = BTreeMap::new();
        for (k, v) in &self.continuations {
            let prefix = k.rsplit_once(KEY_SEPARATOR).map_or("", |(p, _)| p);
            *mass.entry(prefix).or_default() += v.exp();
        }
        let over = std::iter::once(("<first>", first_mass)).chain(mass).find(|(_, m)| *m > 1.0 + 1e-6);
        if let Some((prefix, m)) = over {
            return Err(Error::param(
                "scorer",
                format!("next-token mass after `{prefix}` is {m}, exceeds 1"),
            ));
        }
        Ok(())
    }
}

impl TokenScorer for MockScorer {
    fn log_prob(&self, _input_text: &str, prefix: &[PassageToken], token: &PassageToken) -> Option<f64> {
        if prefix.is_empty() {
            self.first_token.get(&token.text).copied()
        } else {
            let texts: Vec<&str> = prefix.iter().map(|t| t.text.as_str()).collect();
            self.continuations.get(&Self::continuation_key(&texts, &token.text)).copied()
        }
    }
}
