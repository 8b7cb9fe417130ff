//! Metric implementations checked against brute-force oracles.

use std::collections::HashMap;

use edgecap::metrics::{bleu, lcs_len, rouge_l, rouge_lsum, rouge_n, Score};
use proptest::prelude::*;

fn seq(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..10, 0..=max)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Multiset intersection of n-gram lists built by enumerating all windows.
fn brute_ngram_overlap(a: &[u8], b: &[u8], n: usize) -> (usize, usize, usize) {
    let grams = |s: &[u8]| -> Vec<Vec<u8>> {
        if s.len() < n {
            vec![]
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let ga = grams(a);
    let mut gb = grams(b);
    let mut overlap = 0;
    for g in &ga {
        if let Some(pos) = gb.iter().position(|x| x == g) {
            gb.swap_remove(pos);
            overlap += 1;
        }
    }
    (overlap, ga.len(), grams(b).len())
}

/// Longest common subsequence by enumerating every subsequence of the
/// shorter input and checking containment in the other.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subseq = |sub: &[u8]| {
        let mut it = long.iter();
        sub.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let count = mask.count_ones() as usize;
        if count <= best {
            continue;
        }
        let sub: Vec<u8> = (0..short.len()).filter(|i| mask & (1 << i) != 0).map(|i| short[i]).collect();
        if is_subseq(&sub) {
            best = count;
        }
    }
    best
}

fn oracle_score(overlap: usize, c: usize, r: usize) -> Score {
    let p = if c == 0 { 0.0 } else { overlap as f64 / c as f64 };
    let rr = if r == 0 { 0.0 } else { overlap as f64 / r as f64 };
    Score { precision: p, recall: rr, f1: f1(p, rr) }
}

fn close(a: Score, b: Score) -> bool {
    (a.precision - b.precision).abs() < 1e-12 && (a.recall - b.recall).abs() < 1e-12 && (a.f1 - b.f1).abs() < 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rouge_n_matches_brute_force(a in seq(12), b in seq(12), n in 1usize..=3) {
        let (o, c, r) = brute_ngram_overlap(&a, &b, n);
        prop_assert!(close(rouge_n(&a, std::slice::from_ref(&b), n), oracle_score(o, c, r)));
    }

    #[test]
    fn rouge_l_matches_exhaustive_lcs(a in seq(12), b in seq(12)) {
        let l = brute_lcs(&a, &b);
        prop_assert_eq!(lcs_len(&a, &b), l);
        prop_assert!(close(rouge_l(&a, std::slice::from_ref(&b)), oracle_score(l, a.len(), b.len())));
    }

    #[test]
    fn lcs_is_symmetric(a in seq(30), b in seq(30)) {
        prop_assert_eq!(lcs_len(&a, &b), lcs_len(&b, &a));
    }

    #[test]
    fn duplicate_reference_changes_nothing(a in seq(12), refs in prop::collection::vec(seq(12), 1..4), pick in 0usize..4) {
        let mut dup = refs.clone();
        dup.push(refs[pick % refs.len()].clone());
        for n in 1..=3 {
            prop_assert_eq!(rouge_n(&a, &refs, n), rouge_n(&a, &dup, n));
        }
        prop_assert_eq!(rouge_l(&a, &refs), rouge_l(&a, &dup));
        let corpus = vec![(a.clone(), refs.clone())];
        let corpus_dup = vec![(a.clone(), dup)];
        prop_assert_eq!(bleu(&corpus), bleu(&corpus_dup));
    }

    #[test]
    fn relabeling_is_invariant(a in seq(12), b in seq(12), shift in 1u8..10) {
        let relabel = |s: &[u8]| s.iter().map(|x| (x + shift) % 10 + 100).collect::<Vec<u8>>();
        let (ra, rb) = (relabel(&a), relabel(&b));
        for n in 1..=3 {
            prop_assert_eq!(rouge_n(&a, std::slice::from_ref(&b), n), rouge_n(&ra, std::slice::from_ref(&rb), n));
        }
        prop_assert_eq!(rouge_l(&a, std::slice::from_ref(&b)), rouge_l(&ra, std::slice::from_ref(&rb)));
        prop_assert_eq!(
            rouge_lsum(std::slice::from_ref(&a), &[vec![b.clone()]]),
            rouge_lsum(std::slice::from_ref(&ra), &[vec![rb.clone()]])
        );
        prop_assert_eq!(bleu(&[(a.clone(), vec![b.clone()])]), bleu(&[(ra, vec![rb])]));
    }

    #[test]
    fn scores_stay_in_unit_interval(a in seq(12), refs in prop::collection::vec(seq(12), 1..4)) {
        for s in [rouge_n(&a, &refs, 1), rouge_n(&a, &refs, 2), rouge_l(&a, &refs)] {
            for v in [s.precision, s.recall, s.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        let b = bleu(&[(a, refs)]);
        prop_assert!((0.0..=1.0).contains(&b.bleu));
    }

    #[test]
    fn bleu_is_one_iff_exact_match(
        corpus in prop::collection::vec((prop::collection::vec(0u8..10, 4..10), prop::collection::vec(prop::collection::vec(0u8..10, 4..10), 1..3)), 1..5),
        copy in prop::collection::vec(any::<bool>(), 5),
    ) {
        // Randomly replace candidates with one of their references.
        let corpus: Vec<(Vec<u8>, Vec<Vec<u8>>)> = corpus
            .into_iter()
            .zip(copy)
            .map(|((c, r), cp)| if cp { (r[0].clone(), r) } else { (c, r) })
            .collect();
        let all_match = corpus.iter().all(|(c, refs)| refs.iter().any(|r| r == c));
        let score = bleu(&corpus).bleu;
        prop_assert_eq!(all_match, (score - 1.0).abs() < 1e-12, "bleu {} all_match {}", score, all_match);
    }
}

/// Corpus BLEU recomputed from explicit n-gram lists.
fn oracle_bleu(corpus: &[(Vec<u8>, Vec<Vec<u8>>)]) -> f64 {
    let mut m = [0usize; 4];
    let mut t = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refs) in corpus {
        c += cand.len();
        let mut best = refs[0].len();
        for x in refs {
            let d = x.len().abs_diff(cand.len());
            let bd = best.abs_diff(cand.len());
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
        for n in 1..=4 {
            let grams = |s: &[u8]| -> Vec<Vec<u8>> {
                if s.len() < n { vec![] } else { (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect() }
            };
            let cg = grams(cand);
            let mut counts: HashMap<Vec<u8>, usize> = HashMap::new();
            for g in &cg {
                *counts.entry(g.clone()).or_default() += 1;
            }
            for (g, cnt) in counts {
                let max_ref = refs.iter().map(|x| grams(x).iter().filter(|h| **h == g).count()).max().unwrap_or(0);
                m[n - 1] += cnt.min(max_ref);
            }
            t[n - 1] += cg.len();
        }
    }
    if (0..4).any(|i| m[i] == 0) {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * ((0..4).map(|i| (m[i] as f64 / t[i] as f64).ln()).sum::<f64>() / 4.0).exp()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bleu_matches_oracle(corpus in prop::collection::vec((prop::collection::vec(0u8..4, 0..12), prop::collection::vec(prop::collection::vec(0u8..4, 1..12), 1..3)), 1..4)) {
        let got = bleu(&corpus).bleu;
        let want = oracle_bleu(&corpus);
        prop_assert!((got - want).abs() < 1e-12, "got {} want {}", got, want);
    }
}
