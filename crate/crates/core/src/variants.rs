//! Paraphrase aggregation and retrieval-based input augmentation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::Example;
use crate::scoring::{log_sum_exp, NormalizedScores};

/// Default number of unique paraphrases kept per answer.
pub const DEFAULT_PARAPHRASES: usize = 5;
/// Default number of sentences appended by [`augment_input`].
pub const DEFAULT_SENTENCES: usize = 3;

/// Distinct outputs ordered by descending frequency, ties by first
/// appearance, truncated to `k`.
pub fn select_paraphrases<S: AsRef<str>>(beam_outputs: &[S], k: usize) -> Vec<String> {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (pos, out) in beam_outputs.iter().enumerate() {
        counts.entry(out.as_ref()).or_insert((0, pos)).0 += 1;
    }
    let mut ranked: Vec<(&str, usize, usize)> = counts.into_iter().map(|(t, (c, p))| (t, c, p)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.into_iter().take(k).map(|(t, _, _)| t.to_string()).collect()
}

/// Surface forms of one underlying answer with their log-probs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParaphraseGroup {
    pub canonical: String,
    pub members: Vec<(String, f64)>,
    pub is_gold: bool,
}

impl ParaphraseGroup {
    /// `ln Σ exp(log_prob)` over members.
    pub fn log_mass(&self) -> f64 {
        let lps: Vec<f64> = self.members.iter().map(|(_, lp)| *lp).collect();
        log_sum_exp(&lps)
    }

    pub fn mass(&self) -> f64 {
        self.log_mass().exp()
    }
}

/// Groups the candidates of `example` by paraphrase group, in order of first
/// appearance. With `include_canonical = false` the member whose text equals
/// the group name is dropped unless it is the only member.
pub fn paraphrase_groups(example: &Example, include_canonical: bool) -> Vec<ParaphraseGroup> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, ParaphraseGroup> = HashMap::new();
    for c in &example.candidates {
        let key = c.group_key();
        let g = groups.entry(key).or_insert_with(|| {
            order.push(key);
            ParaphraseGroup {
                canonical: key.to_string(),
                members: Vec::new(),
                is_gold: false,
            }
        });
        g.members.push((c.text.clone(), c.log_prob));
        g.is_gold |= c.is_gold;
    }
    order
        .into_iter()
        .map(|k| {
            let mut g = groups.remove(k).expect("group recorded in order");
            if !include_canonical && g.members.len() > 1 {
                g.members.retain(|(t, _)| *t != g.canonical);
            }
            g
        })
        .collect()
}

/// Group probabilities: member masses summed, then normalized over groups.
pub fn aggregate_paraphrases(example: &Example, include_canonical: bool) -> (Vec<ParaphraseGroup>, NormalizedScores) {
    let groups = paraphrase_groups(example, include_canonical);
    let log_masses: Vec<f64> = groups.iter().map(ParaphraseGroup::log_mass).collect();
    let scores = NormalizedScores::from_logits(&log_masses);
    (groups, scores)
}

/// Collapses each paraphrase group into one candidate whose `log_prob` is the
/// log of its normalized group probability. Token log-probs and paraphrase
/// tags are dropped; other candidate fields come from the first member.
pub fn collapse_paraphrases(example: &Example, include_canonical: bool) -> Example {
    let (groups, scores) = aggregate_paraphrases(example, include_canonical);
    let mut out = example.clone();
    out.candidates = groups
        .iter()
        .zip(&scores.probs)
        .map(|(g, p)| {
            let mut c = example
                .candidates
                .iter()
                .find(|c| c.text == g.canonical)
                .or_else(|| example.candidates.iter().find(|c| c.group_key() == g.canonical))
                .expect("group has at least one member")
                .clone();
            c.text = g.canonical.clone();
            c.log_prob = p.ln().min(0.0);
            c.token_log_probs = None;
            c.paraphrase_group = None;
            c.features = None;
            c.confidence = None;
            c.is_gold = g.is_gold;
            c
        })
        .collect();
    out
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Unigram and bigram terms of `text`, lowercased with punctuation removed.
pub fn terms(text: &str) -> Vec<String> {
    let w = words(text);
    let bigrams = w.windows(2).map(|p| format!("{} {}", p[0], p[1]));
    w.iter().cloned().chain(bigrams).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

/// TF-IDF index over unigrams and bigrams of title and body.
#[derive(Debug, Clone)]
pub struct Corpus {
    documents: Vec<Document>,
    vocab: HashMap<String, usize>,
    idf: Vec<f64>,
    /// Sparse document vectors sorted by term id, L2-normalized.
    vectors: Vec<Vec<(usize, f64)>>,
}

fn term_counts(terms: Vec<String>) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    for t in terms {
        *counts.entry(t).or_insert(0.0) += 1.0;
    }
    counts
}

fn l2_normalize(v: &mut [(usize, f64)]) {
    let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, w) in v.iter_mut() {
            *w /= norm;
        }
    }
}

impl Corpus {
    /// Indexes `documents`. Term ids follow lexicographic term order, so the
    /// index does not depend on document order.
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut ids = HashSet::new();
        for d in &documents {
            if !ids.insert(d.doc_id.as_str()) {
                return Err(Error::param("corpus", format!("duplicate doc_id `{}`", d.doc_id)));
            }
        }
        let counts: Vec<BTreeMap<String, f64>> = documents
            .iter()
            .map(|d| term_counts(terms(&format!("{}\n{}", d.title, d.text))))
            .collect();
        let all: BTreeSet<&String> = counts.iter().flat_map(|c| c.keys()).collect();
        let vocab: HashMap<String, usize> = all.into_iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let mut df = vec![0usize; vocab.len()];
        for c in &counts {
            for t in c.keys() {
                df[vocab[t]] += 1;
            }
        }
        let n = documents.len() as f64;
        let idf: Vec<f64> = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
        let vectors = counts
            .iter()
            .map(|c| {
                let mut v: Vec<(usize, f64)> = c.iter().map(|(t, tf)| (vocab[t], tf * idf[vocab[t]])).collect();
                v.sort_by_key(|(i, _)| *i);
                l2_normalize(&mut v);
                v
            })
            .collect();
        Ok(Corpus {
            documents,
            vocab,
            idf,
            vectors,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    /// Normalized TF-IDF vector of a query; unseen terms are dropped.
    pub fn query_vector(&self, query: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = term_counts(terms(query))
            .into_iter()
            .filter_map(|(t, tf)| self.vocab.get(&t).map(|&i| (i, tf * self.idf[i])))
            .collect();
        v.sort_by_key(|(i, _)| *i);
        l2_normalize(&mut v);
        v
    }

    /// Cosine similarity of `query` to every document, in document order.
    pub fn similarities(&self, query: &str) -> Vec<f64> {
        let q = self.query_vector(query);
        self.vectors.iter().map(|d| sparse_dot(&q, d)).collect()
    }
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut sum) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                sum += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    sum
}

/// The `top_n` most similar documents; ties go to the lower doc id.
pub fn tfidf_retrieve(corpus: &Corpus, query: &str, top_n: usize) -> Result<Vec<String>> {
    if corpus.documents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if query.trim().is_empty() {
        return Err(Error::param("query", "must not be blank"));
    }
    let sims = corpus.similarities(query);
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .total_cmp(&sims[a])
            .then_with(|| corpus.documents[a].doc_id.cmp(&corpus.documents[b].doc_id))
    });
    Ok(order
        .into_iter()
        .take(top_n)
        .map(|i| corpus.documents[i].doc_id.clone())
        .collect())
}

/// Text before the first blank line.
pub fn first_paragraph(body: &str) -> &str {
    let mut offset = 0;
    let mut started = false;
    for line in body.split_inclusive('\n') {
        let blank = line.trim().is_empty();
        if blank && started {
            return body[..offset].trim();
        }
        started |= !blank;
        offset += line.len();
    }
    body.trim()
}

/// Splits after `.`, `?` or `!` when followed by whitespace and then an
/// uppercase letter. Abbreviations are not special-cased.
pub fn split_sentences(paragraph: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = paragraph.char_indices().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if matches!(c, '.' | '?' | '!') {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            if j > i + 1 && j < chars.len() && chars[j].1.is_uppercase() {
                let end = pos + c.len_utf8();
                sentences.push(paragraph[start..end].to_string());
                start = chars[j].0;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    if start < paragraph.len() && !paragraph[start..].trim().is_empty() {
        sentences.push(paragraph[start..].to_string());
    }
    sentences
        .into_iter()
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|s| !s.is_empty())
        .collect()
}

/// Returns a copy of `example` with the first `n_sentences` sentences of the
/// article's first paragraph appended to the input on a new line.
pub fn augment_input(example: &Example, article_body: &str, n_sentences: usize) -> Example {
    let sentences = split_sentences(first_paragraph(article_body));
    let mut out = example.clone();
    let addition: Vec<&str> = sentences.iter().take(n_sentences).map(String::as_str).collect();
    if !addition.is_empty() {
        out.input_text = format!("{}\n{}", example.input_text, addition.join(" "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{Candidate, Format, Split};
    use crate::scoring::normalize;

    #[test]
    fn frequency_order() {
        assert_eq!(select_paraphrases(&["x", "x", "y"], 2), vec!["x", "y"]);
        assert_eq!(select_paraphrases(&["a", "b", "b", "a", "c"], 3), vec!["a", "b", "c"]);
        assert_eq!(select_paraphrases(&vec!["same"; 100], 5), vec!["same"]);
        assert!(select_paraphrases::<&str>(&[], 5).is_empty());
    }

    fn with_groups(members: &[(&str, f64, Option<&str>, bool)]) -> Example {
        let cands = members
            .iter()
            .map(|(t, p, g, gold)| {
                let mut c = Candidate::new(*t, p.ln()).gold(*gold);
                c.paraphrase_group = g.map(str::to_string);
                c
            })
            .collect();
        Example::new("q", "siqa", Split::Test, Format::MultipleChoice, "How would you describe Addison?", cands)
    }

    #[test]
    fn devoted_group_mass() {
        let ex = with_groups(&[
            ("devoted", 0.04, Some("devoted"), true),
            ("dedicated", 0.94, Some("devoted"), false),
            ("commitment", 0.11, Some("devoted"), false),
            ("dedication", 0.39, Some("devoted"), false),
        ]);
        let groups = paraphrase_groups(&ex, true);
        assert_eq!(groups.len(), 1);
        assert!((groups[0].mass() - 1.48).abs() < 1e-12);
        assert!(groups[0].is_gold);
        let (_, scores) = aggregate_paraphrases(&ex, true);
        assert_eq!(scores.probs, vec![1.0]);
        let without = paraphrase_groups(&ex, false);
        assert!((without[0].mass() - 1.44).abs() < 1e-12);
    }

    #[test]
    fn two_groups_normalize() {
        let ex = with_groups(&[
            ("a", 1.0, None, true),
            ("b", 1.0, None, false),
            ("b2", 1.0, Some("b"), false),
            ("b3", 1.0, Some("b"), false),
        ]);
        let (groups, s) = aggregate_paraphrases(&ex, true);
        assert_eq!(groups.len(), 2);
        assert!((groups[0].mass() - 1.0).abs() < 1e-15);
        assert!((groups[1].mass() - 3.0).abs() < 1e-12);
        assert!((s.probs[0] - 0.25).abs() < 1e-15 && (s.probs[1] - 0.75).abs() < 1e-15);
        assert_eq!(s.predicted_index, 1);
    }

    #[test]
    fn singleton_groups_equal_normalize() {
        let ex = with_groups(&[("a", 0.2, None, true), ("b", 0.7, None, false), ("c", 0.01, None, false)]);
        let (_, s) = aggregate_paraphrases(&ex, true);
        assert_eq!(s, normalize(&ex));
    }

    #[test]
    fn collapse_keeps_one_candidate_per_group() {
        let ex = with_groups(&[
            ("devoted", 0.04, Some("devoted"), true),
            ("dedicated", 0.94, Some("devoted"), false),
            ("excited", 0.5, None, false),
        ]);
        let out = collapse_paraphrases(&ex, true);
        assert_eq!(out.candidates.len(), 2);
        assert_eq!(out.candidates[0].text, "devoted");
        assert!(out.candidates[0].is_gold);
        assert!((out.candidates[0].log_prob.exp() - 0.98 / 1.48).abs() < 1e-12);
        assert!(out.validate().is_ok());
    }

    fn doc(id: &str, text: &str) -> Document {
        Document {
            doc_id: id.into(),
            title: String::new(),
            text: text.into(),
        }
    }

    #[test]
    fn single_document_corpus() {
        let c = Corpus::new(vec![doc("only", "nothing in common")]).unwrap();
        assert_eq!(tfidf_retrieve(&c, "photosynthesis", 1).unwrap(), vec!["only"]);
    }

    #[test]
    fn unique_term_dominates() {
        let c = Corpus::new(vec![
            doc("a", "plants make sugar in leaves"),
            doc("b", "chlorophyll absorbs light in leaves"),
            doc("c", "animals eat plants"),
        ])
        .unwrap();
        assert_eq!(tfidf_retrieve(&c, "chlorophyll chlorophyll", 1).unwrap(), vec!["b"]);
    }

    #[test]
    fn empty_corpus_and_blank_query() {
        let c = Corpus::new(vec![]).unwrap();
        assert!(matches!(tfidf_retrieve(&c, "x", 1), Err(Error::EmptyCorpus)));
        let c = Corpus::new(vec![doc("a", "x")]).unwrap();
        assert!(tfidf_retrieve(&c, "  ", 1).is_err());
        assert!(Corpus::new(vec![doc("a", "x"), doc("a", "y")]).is_err());
    }

    #[test]
    fn bigram_terms() {
        assert_eq!(terms("The cat, sat."), vec!["the", "cat", "sat", "the cat", "cat sat"]);
    }

    fn question() -> Example {
        let c = vec![Candidate::new("x", -0.1).gold(true)];
        Example::new("q", "d", Split::Test, Format::MultipleChoice, "Question?", c)
    }

    #[test]
    fn augment_one_sentence() {
        let out = augment_input(&question(), "Only one sentence here.", 3);
        assert_eq!(out.input_text, "Question?\nOnly one sentence here.");
    }

    #[test]
    fn augment_takes_three_sentences() {
        let out = augment_input(&question(), "A. B. C. D.", 3);
        assert_eq!(out.input_text, "Question?\nA. B. C.");
    }

    #[test]
    fn only_first_paragraph_is_used() {
        let body = "First one. Second one.\n\nThird in next paragraph.";
        let out = augment_input(&question(), body, 3);
        assert_eq!(out.input_text, "Question?\nFirst one. Second one.");
        assert_eq!(question().input_text, "Question?");
    }

    #[test]
    fn lowercase_after_period_does_not_split() {
        assert_eq!(split_sentences("Version 2.0 is out. e.g. this. Next!"), vec![
            "Version 2.0 is out. e.g. this.",
            "Next!"
        ]);
    }
}
