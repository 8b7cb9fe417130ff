use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::rouge::ngram_counts;

pub const MAX_ORDER: usize = 4;

/// Added to zero n-gram precisions when smoothing is on.
pub const SMOOTHING_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub bleu: f64,
    /// Modified n-gram precisions for n = 1..=4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

/// Length of the reference closest to `c`, preferring the shorter on ties.
fn closest_ref_len<T>(c: usize, references: &[Vec<T>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Unsmoothed corpus BLEU over `(candidate, references)` pairs.
pub fn bleu<T: Hash + Eq>(corpus: &[(Vec<T>, Vec<Vec<T>>)]) -> BleuScore {
    bleu_with(corpus, false)
}

/// Corpus BLEU; `smooth` adds [`SMOOTHING_EPSILON`] to zero precisions.
pub fn bleu_with<T: Hash + Eq>(corpus: &[(Vec<T>, Vec<Vec<T>>)], smooth: bool) -> BleuScore {
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let mut c_len = 0;
    let mut r_len = 0;
    for (cand, refs) in corpus {
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), refs);
        for n in 1..=MAX_ORDER {
            let (cc, ct) = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                let (rc, _) = ngram_counts(r, n);
                for (g, c) in rc {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            matched[n - 1] += cc.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum::<usize>();
            total[n - 1] += ct;
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if total[n] == 0 { 0.0 } else { matched[n] as f64 / total[n] as f64 };
    }
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let effective: Vec<f64> = precisions
        .iter()
        .map(|&p| if p == 0.0 && smooth { SMOOTHING_EPSILON } else { p })
        .collect();
    let bleu = if effective.contains(&0.0) {
        0.0
    } else {
        brevity_penalty * (effective.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
    };
    BleuScore { bleu, precisions, brevity_penalty, candidate_len: c_len, reference_len: r_len }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn clipping_example() {
        let corpus = vec![(w("the the the the the the the"), vec![w("the cat is on the mat")])];
        let s = bleu(&corpus);
        assert!((s.precisions[0] - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(s.bleu, 0.0);
    }

    #[test]
    fn identical_corpus_scores_one() {
        let corpus = vec![
            (w("a dog catches a frisbee"), vec![w("a dog catches a frisbee"), w("a dog in the air")]),
            (w("two men in suits standing"), vec![w("three men"), w("two men in suits standing")]),
        ];
        let s = bleu(&corpus);
        assert_eq!(s.bleu, 1.0);
        assert_eq!(s.brevity_penalty, 1.0);
    }

    #[test]
    fn no_four_gram_match_is_zero() {
        let corpus = vec![(w("a b c d e"), vec![w("a b c x d e")])];
        assert_eq!(bleu(&corpus).precisions[3], 0.0);
        assert_eq!(bleu(&corpus).bleu, 0.0);
        assert!(bleu_with(&corpus, true).bleu > 0.0);
    }

    #[test]
    fn brevity_penalty_for_short_candidates() {
        let corpus = vec![(w("a b c d"), vec![w("a b c d e f g h")])];
        let s = bleu(&corpus);
        assert!((s.brevity_penalty - (1.0f64 - 2.0).exp()).abs() < 1e-15);
        assert!((s.bleu - s.brevity_penalty).abs() < 1e-15);
    }

    #[test]
    fn closest_reference_prefers_shorter_on_tie() {
        let refs = vec![w("a b c d e f"), w("a b")];
        assert_eq!(closest_ref_len(4, &refs), 2);
    }

    #[test]
    fn empty_candidate_contributes_nothing() {
        let corpus = vec![(w(""), vec![w("a b")]), (w("a b c d"), vec![w("a b c d")])];
        let s = bleu(&corpus);
        assert_eq!(s.candidate_len, 4);
        assert_eq!(s.reference_len, 6);
        assert_eq!(s.precisions[0], 1.0);
    }
}
