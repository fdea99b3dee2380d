//! Synthetic data generators and independent oracles shared by the
//! integration tests. Nothing here calls into the code paths it checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use qacal::records::{Candidate, DatasetCollection, Example, Format, Split};
use qacal::spans::{MockScorer, PassageToken, SpanCandidate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Softmax by direct exponentiation, without the max shift.
pub fn naive_softmax(xs: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Log-softmax so that generated log-probs are <= 0.
pub fn log_normalize(xs: &[f64]) -> Vec<f64> {
    let s: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
    xs.iter().map(|x| (x - s).min(0.0)).collect()
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Multiple-choice example whose gold is drawn from `softmax(z / true_tau)`
/// and whose log-probs are `log_softmax(z)`.
pub fn tempered_example(
    rng: &mut ChaCha8Rng,
    id: String,
    dataset: &str,
    split: Split,
    n_candidates: usize,
    spread: f64,
    true_tau: f64,
) -> Example {
    let z: Vec<f64> = (0..n_candidates).map(|_| rng.gen_range(-spread..0.0)).collect();
    let scaled: Vec<f64> = z.iter().map(|v| v / true_tau).collect();
    let gold = sample_index(rng, &naive_softmax(&scaled));
    let lps = log_normalize(&z);
    let cands = lps
        .iter()
        .enumerate()
        .map(|(i, lp)| Candidate::new(format!("option {i}"), *lp).gold(i == gold))
        .collect();
    let words = rng.gen_range(3..15);
    let input = (0..words).map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
    let mut ex = Example::new(id, dataset, split, Format::MultipleChoice, input, cands);
    let n_in = rng.gen_range(2..8);
    ex.input_token_log_probs = Some((0..n_in).map(|_| rng.gen_range(-5.0..-0.01)).collect());
    ex
}

pub fn tempered_examples(seed: u64, n: usize, dataset: &str, split: Split, true_tau: f64) -> Vec<Example> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| tempered_example(&mut r, format!("{dataset}-{split}-{i}"), dataset, split, 4, 8.0, true_tau))
        .collect()
}

/// Items whose correctness is Bernoulli(confidence).
pub fn calibrated_items(seed: u64, n: usize) -> Vec<(f64, bool)> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let c: f64 = r.gen();
            let ok = r.gen::<f64>() < c;
            (c, ok)
        })
        .collect()
}

/// Bucketing by scanning every interval `((m-1)/M, m/M]`, 0 into the first.
pub fn brute_bucket(c: f64, m: usize) -> usize {
    if c == 0.0 {
        return 0;
    }
    for b in 1..=m {
        let lo = (b - 1) as f64 / m as f64;
        let hi = b as f64 / m as f64;
        if lo < c && c <= hi {
            return b - 1;
        }
    }
    panic!("confidence {c} not in any bucket");
}

pub fn brute_ece(items: &[(f64, bool)], m: usize) -> f64 {
    let mut members: Vec<Vec<(f64, bool)>> = vec![Vec::new(); m];
    for &it in items {
        members[brute_bucket(it.0, m)].push(it);
    }
    let n = items.len() as f64;
    members
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| {
            let k = b.len() as f64;
            let conf = b.iter().map(|i| i.0).sum::<f64>() / k;
            let acc = b.iter().filter(|i| i.1).count() as f64 / k;
            k / n * (acc - conf).abs()
        })
        .sum()
}

/// Central finite-difference gradient.
pub fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += h;
            minus[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor for near-zero components.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Area under the ROC curve by counting concordant pairs.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Noiseless XOR of two thresholds on uniform features.
pub fn xor_data(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut r = rng(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = r.gen();
        let b: f64 = r.gen();
        rows.push(vec![a, b]);
        labels.push((a > 0.5) != (b > 0.5));
    }
    (rows, labels)
}

/// Random passage over a small vocabulary with a complete mock scorer table:
/// first-token and every continuation distribution are log-softmaxes over the
/// vocabulary, so every key the passage can require is present.
pub fn random_span_fixture(seed: u64, max_passage: usize, vocab_size: usize) -> (Vec<String>, MockScorer) {
    let mut r = rng(seed);
    let len = r.gen_range(1..=max_passage);
    let vocab: Vec<String> = (0..vocab_size).map(|i| format!("t{i}")).collect();
    let passage: Vec<String> = (0..len).map(|_| vocab[r.gen_range(0..vocab_size)].clone()).collect();
    let dist = |r: &mut ChaCha8Rng| {
        // Coarse values make exact ties between spans likely.
        let raw: Vec<f64> = (0..vocab_size).map(|_| r.gen_range(0..4) as f64).collect();
        log_normalize(&raw)
    };
    let mut scorer = MockScorer::default();
    let first = dist(&mut r);
    for (t, lp) in vocab.iter().zip(first) {
        scorer.first_token.insert(t.clone(), lp);
    }
    let mut prefixes: HashSet<Vec<String>> = HashSet::new();
    for start in 0..len {
        for end in start + 1..len.min(start + 20) {
            prefixes.insert(passage[start..end].to_vec());
        }
    }
    let mut prefixes: Vec<Vec<String>> = prefixes.into_iter().collect();
    prefixes.sort();
    for p in prefixes {
        let d = dist(&mut r);
        for (t, lp) in vocab.iter().zip(d) {
            let key = format!("{}|{}", p.join("|"), t);
            scorer.continuations.insert(key, lp);
        }
    }
    (passage, scorer)
}

/// Scores every span of up to `max_len` tokens directly from the tables and
/// applies dedup-by-text (best first) and top-k with ties on start, length.
pub fn brute_spans(passage: &[String], scorer: &MockScorer, max_len: usize, k: usize) -> Vec<(usize, usize, String, f64)> {
    let mut all = Vec::new();
    for start in 0..passage.len() {
        for len in 1..=max_len.min(passage.len() - start) {
            let toks = &passage[start..start + len];
            let mut lp = scorer.first_token[&toks[0]];
            for j in 1..len {
                let key = format!("{}|{}", toks[..j].join("|"), toks[j]);
                lp += scorer.continuations[&key];
            }
            all.push((start, len, toks.join(" "), lp));
        }
    }
    all.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut best: BTreeMap<String, ()> = BTreeMap::new();
    let mut out = Vec::new();
    for s in all {
        if best.insert(s.2.clone(), ()).is_none() {
            out.push(s);
        }
    }
    out.truncate(k);
    out
}

/// Token "a" dominates the first position but every continuation of it is
/// effectively impossible; "b" is unlikely first but continues well.
pub fn pruning_fixture() -> (Vec<String>, MockScorer) {
    let passage: Vec<String> = ["a", "x", "b", "y"].iter().map(|s| s.to_string()).collect();
    let mut s = MockScorer::default();
    s.first_token.insert("a".into(), 0.9f64.ln());
    s.first_token.insert("b".into(), 0.05f64.ln());
    s.first_token.insert("x".into(), 0.02f64.ln());
    s.first_token.insert("y".into(), 0.02f64.ln());
    let bad = -1e9;
    for key in ["a|x", "a|x|b", "a|x|b|y"] {
        s.continuations.insert(key.into(), bad);
    }
    for key in ["b|y", "x|b", "x|b|y"] {
        s.continuations.insert(key.into(), -0.05);
    }
    (passage, s)
}

pub fn span_summary(spans: &[SpanCandidate]) -> Vec<(usize, usize, String, f64)> {
    spans.iter().map(|s| (s.start, s.length, s.text.clone(), s.log_prob)).collect()
}

pub fn passage_tokens(texts: &[String]) -> Vec<PassageToken> {
    qacal::spans::tokens_from_strings(texts)
}

/// Three datasets with dev and test splits. Log-probs are overconfident by a
/// factor `true_tau` (gold drawn from `softmax(z / true_tau)`).
pub fn pipeline_fixture(seed: u64, per_split: usize, true_tau: f64) -> DatasetCollection {
    let mut examples = Vec::new();
    for (d, name) in ["arc", "obqa", "siqa"].iter().enumerate() {
        for (s, split) in [Split::Dev, Split::Test].iter().enumerate() {
            examples.extend(tempered_examples(seed + 10 * d as u64 + s as u64, per_split, name, *split, true_tau));
        }
    }
    DatasetCollection::new(examples).unwrap()
}
