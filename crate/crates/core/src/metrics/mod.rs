//! Caption quality metrics: ROUGE-1/2/L/Lsum and corpus BLEU-4.

mod bleu;
mod rouge;
mod text;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu, bleu_with, BleuScore, MAX_ORDER, SMOOTHING_EPSILON};
pub use rouge::{lcs_len, rouge_l, rouge_lsum, rouge_n};
pub use text::{normalize_tokens, split_sentences};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Score {
    /// Precision/recall from an overlap count; zero when either side is empty.
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        if overlap == 0 || candidate_total == 0 || reference_total == 0 {
            return Score::default();
        }
        let precision = overlap as f64 / candidate_total as f64;
        let recall = overlap as f64 / reference_total as f64;
        Score { precision, recall, f1: 2.0 * precision * recall / (precision + recall) }
    }
}

/// A tokenized candidate with its tokenized references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl ScoredPair {
    pub fn from_text<S: AsRef<str>>(candidate: &str, references: &[S]) -> Self {
        ScoredPair {
            candidate: normalize_tokens(candidate),
            references: references.iter().map(|r| normalize_tokens(r.as_ref())).collect(),
        }
    }
}

/// A candidate caption with its references, both as raw text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextPair {
    pub candidate: String,
    pub references: Vec<String>,
}

/// Corpus-level metrics. ROUGE scores are per-pair best-reference scores
/// averaged over the corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rouge1: Score,
    pub rouge2: Score,
    #[serde(rename = "rougeL")]
    pub rouge_l: Score,
    #[serde(rename = "rougeLsum")]
    pub rouge_lsum: Score,
    pub bleu: BleuScore,
    pub pairs: usize,
}

fn add(acc: &mut Score, s: Score) {
    acc.precision += s.precision;
    acc.recall += s.recall;
    acc.f1 += s.f1;
}

fn div(s: Score, k: f64) -> Score {
    Score { precision: s.precision / k, recall: s.recall / k, f1: s.f1 / k }
}

/// Scores a corpus after text normalization (lowercase, punctuation
/// stripped, whitespace tokens).
pub fn evaluate(pairs: &[TextPair]) -> MetricReport {
    let mut report = MetricReport { pairs: pairs.len(), ..Default::default() };
    if pairs.is_empty() {
        return report;
    }
    let mut corpus = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ScoredPair { candidate: cand, references: refs } = ScoredPair::from_text(&p.candidate, &p.references);
        add(&mut report.rouge1, rouge_n(&cand, &refs, 1));
        add(&mut report.rouge2, rouge_n(&cand, &refs, 2));
        add(&mut report.rouge_l, rouge_l(&cand, &refs));
        let cand_sents = split_sentences(&p.candidate);
        let ref_sents: Vec<Vec<Vec<String>>> = p.references.iter().map(|r| split_sentences(r)).collect();
        add(&mut report.rouge_lsum, rouge_lsum(&cand_sents, &ref_sents));
        corpus.push((cand, refs));
    }
    let k = pairs.len() as f64;
    report.rouge1 = div(report.rouge1, k);
    report.rouge2 = div(report.rouge2, k);
    report.rouge_l = div(report.rouge_l, k);
    report.rouge_lsum = div(report.rouge_lsum, k);
    report.bleu = bleu(&corpus);
    report
}
