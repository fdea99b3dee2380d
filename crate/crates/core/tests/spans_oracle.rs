mod common;

use std::collections::BTreeSet;

use common::{brute_spans, passage_tokens, pruning_fixture, random_span_fixture, rng, span_summary};
use proptest::prelude::*;
use qacal::spans::{enumerate_spans, SpanConfig};
use rand::Rng;

fn exhaustive(vocab: usize, k: usize) -> SpanConfig {
    SpanConfig {
        top_r: vocab,
        top_k: k,
        max_len: 20,
    }
}

#[test]
fn exhaustive_config_matches_all_spans_oracle() {
    let mut r = rng(99);
    for seed in 0..100 {
        let vocab = r.gen_range(2..8);
        let (passage, scorer) = random_span_fixture(seed, 30, vocab);
        let k = r.gen_range(1..40);
        let got = enumerate_spans("q", &passage_tokens(&passage), &scorer, &exhaustive(vocab, k)).unwrap();
        assert_eq!(span_summary(&got), brute_spans(&passage, &scorer, 20, k), "fixture {seed}");
        for s in &got {
            assert_eq!(s.token_log_probs.len(), s.length);
            assert_eq!(s.token_log_probs.iter().sum::<f64>(), s.log_prob);
        }
    }
}

#[test]
fn top_one_first_token_prunes_other_families() {
    let (passage, scorer) = pruning_fixture();
    scorer.validate().unwrap();
    let cfg = SpanConfig {
        top_r: 1,
        top_k: 10,
        max_len: 20,
    };
    let out = enumerate_spans("q", &passage_tokens(&passage), &scorer, &cfg).unwrap();
    assert!(out[0].text.starts_with('a'));
    assert!(out.iter().all(|s| s.start == 0));
    assert!(out.iter().all(|s| !s.text.starts_with('b')));
    // Without pruning the "b" family outranks every multi-token "a" span.
    let wide = SpanConfig { top_r: 4, ..cfg };
    let all = enumerate_spans("q", &passage_tokens(&passage), &scorer, &wide).unwrap();
    let texts: Vec<&str> = all.iter().map(|s| s.text.as_str()).collect();
    assert_eq!(&texts[..3], ["a", "b", "b y"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_r_only_adds_start_tokens(seed in 0u64..10_000, vocab in 2usize..6) {
        let (passage, scorer) = random_span_fixture(seed, 15, vocab);
        let toks = passage_tokens(&passage);
        let mut prev: BTreeSet<String> = BTreeSet::new();
        for r in 1..=vocab {
            let cfg = SpanConfig { top_r: r, top_k: 10_000, max_len: 20 };
            let out = enumerate_spans("q", &toks, &scorer, &cfg).unwrap();
            let firsts: BTreeSet<String> = out.iter().map(|s| passage[s.start].clone()).collect();
            prop_assert!(prev.is_subset(&firsts));
            prop_assert!(firsts.len() <= r);
            prev = firsts;
        }
    }

    #[test]
    fn output_is_sorted_and_unique(seed in 0u64..10_000, k in 1usize..20) {
        let (passage, scorer) = random_span_fixture(seed, 20, 4);
        let out = enumerate_spans("q", &passage_tokens(&passage), &scorer, &SpanConfig { top_r: 2, top_k: k, max_len: 5 }).unwrap();
        prop_assert!(out.len() <= k);
        prop_assert!(out.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
        let texts: BTreeSet<&str> = out.iter().map(|s| s.text.as_str()).collect();
        prop_assert_eq!(texts.len(), out.len());
        prop_assert!(out.iter().all(|s| s.length <= 5 && s.start + s.length <= passage.len()));
    }
}
