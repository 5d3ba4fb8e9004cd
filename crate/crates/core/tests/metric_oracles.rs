mod common;

use common::brute_lcs;
use proptest::prelude::*;
use textcomp::eval::{bleu, brevity_penalty, corpus_rouge, lcs_len, rouge_l, rouge_n};

fn seq(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..=max)
}

proptest! {
    #[test]
    fn lcs_matches_enumeration(a in seq(10), b in seq(10)) {
        prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
    }

    #[test]
    fn rouge_scores_are_bounded_and_symmetric(a in seq(12), b in seq(12)) {
        for n in 1..=2 {
            let ab = rouge_n(&a, &b, n).unwrap();
            let ba = rouge_n(&b, &a, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab.f1));
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert!((ab.f1 - ba.f1).abs() < 1e-12);
        }
        let l = rouge_l(&a, &b);
        prop_assert!((0.0..=1.0).contains(&l.f1));
    }

    #[test]
    fn self_scores_are_perfect(a in prop::collection::vec(0u8..50, 4..20)) {
        prop_assert!((bleu(&[a.clone()], &[a.clone()], 4, false).unwrap().score - 100.0).abs() < 1e-9);
        prop_assert_eq!(rouge_l(&a, &a).f1, 1.0);
        prop_assert_eq!(rouge_n(&a, &a, 1).unwrap().f1, 1.0);
    }
}

#[test]
fn hand_cases() {
    let w = |s: &'static str| s.split_whitespace().collect::<Vec<_>>();
    let r1 = rouge_n(&w("the cat was found under the bed"), &w("the cat was under the bed"), 1).unwrap();
    assert_eq!(r1.precision, 6.0 / 7.0);
    assert_eq!(r1.recall, 1.0);
    let r2 = rouge_n(&w("the cat was found under the bed"), &w("the cat was under the bed"), 2).unwrap();
    assert_eq!(r2.precision, 4.0 / 6.0);
    assert_eq!(r2.recall, 4.0 / 5.0);
    assert!((brevity_penalty(2, 4) - (-1f64).exp()).abs() < 1e-9);
    assert_eq!(brevity_penalty(5, 4), 1.0);
    let corpus = corpus_rouge(&[w("a b"), w("c")], &[w("a b"), w("d")]).unwrap();
    assert!((corpus.rouge1 - 0.5).abs() < 1e-15);
}
