use std::collections::HashMap;
use std::hash::Hash;

use super::Score;

/// Multiset of the n-grams in `tokens`, plus their total count.
pub(crate) fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> (HashMap<&[T], usize>, usize) {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return (counts, 0);
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    (counts, tokens.len() + 1 - n)
}

fn best_by_f1(scores: impl Iterator<Item = Score>) -> Score {
    scores.fold(Score::default(), |best, s| if s.f1 > best.f1 { s } else { best })
}

/// ROUGE-N against the best-matching reference (highest f1).
///
/// Overlap is the clipped count of shared n-grams. A candidate or reference
/// shorter than `n` scores zero.
pub fn rouge_n<T: Hash + Eq>(candidate: &[T], references: &[Vec<T>], n: usize) -> Score {
    let (cand, cand_total) = ngram_counts(candidate, n);
    best_by_f1(references.iter().map(|r| {
        let (refc, ref_total) = ngram_counts(r, n);
        let overlap: usize = cand.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
        Score::from_counts(overlap, cand_total, ref_total)
    }))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_single<T: Eq>(candidate: &[T], reference: &[T]) -> Score {
    Score::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// ROUGE-L (LCS-based) against the best-matching reference.
pub fn rouge_l<T: Eq>(candidate: &[T], references: &[Vec<T>]) -> Score {
    best_by_f1(references.iter().map(|r| rouge_l_single(candidate, r)))
}

/// Sentence-averaged ROUGE-L.
///
/// Each candidate sentence is scored against its best-matching sentence of
/// a reference; precision, recall and f1 are averaged over candidate
/// sentences. The best reference (by averaged f1) is reported.
pub fn rouge_lsum<T: Eq>(candidate: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Score {
    if candidate.is_empty() {
        return Score::default();
    }
    best_by_f1(references.iter().map(|ref_sents| {
        let mut acc = Score::default();
        for sent in candidate {
            let best = best_by_f1(ref_sents.iter().map(|r| rouge_l_single(sent, r)));
            acc.precision += best.precision;
            acc.recall += best.recall;
            acc.f1 += best.f1;
        }
        let k = candidate.len() as f64;
        Score { precision: acc.precision / k, recall: acc.recall / k, f1: acc.f1 / k }
    }))
}
