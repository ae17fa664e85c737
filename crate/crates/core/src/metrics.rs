//! Classification and generation metrics.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::NUM_OPTIONS;
use crate::error::{Error, Result};

/// `(accuracy, f1_macro)` over the four answer labels. A class with
/// `precision + recall = 0` contributes F1 = 0.
pub fn classification_metrics(gold: &[usize], pred: &[usize]) -> Result<(f64, f64)> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!("{} gold labels but {} predictions", gold.len(), pred.len())));
    }
    if let Some(bad) = gold.iter().chain(pred).find(|&&l| l >= NUM_OPTIONS) {
        return Err(Error::Invalid(format!("label {bad} out of range")));
    }
    if gold.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut tp = [0usize; NUM_OPTIONS];
    let mut predicted = [0usize; NUM_OPTIONS];
    let mut actual = [0usize; NUM_OPTIONS];
    for (&g, &p) in gold.iter().zip(pred) {
        actual[g] += 1;
        predicted[p] += 1;
        if g == p {
            tp[g] += 1;
        }
    }
    let accuracy = tp.iter().sum::<usize>() as f64 / gold.len() as f64;
    let mut f1_sum = 0.0;
    for c in 0..NUM_OPTIONS {
        let precision = if predicted[c] == 0 { 0.0 } else { tp[c] as f64 / predicted[c] as f64 };
        let recall = if actual[c] == 0 { 0.0 } else { tp[c] as f64 / actual[c] as f64 };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok((accuracy, f1_sum / NUM_OPTIONS as f64))
}

/// Added to zero n-gram match counts before taking logs.
pub const BLEU_EPSILON: f64 = 0.1;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-4 with uniform weights and a brevity penalty.
///
/// Clipped n-gram matches and hypothesis n-gram totals are summed over the
/// corpus. With no unigram match at all the score is 0; otherwise an order
/// with zero matches uses `BLEU_EPSILON` in place of the count.
pub fn corpus_bleu4<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (gram, count) in ngram_counts(h, n) {
                matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matches[0] == 0 || hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let num = if matches[n] == 0 { BLEU_EPSILON } else { matches[n] as f64 };
        log_sum += (num / totals[n].max(1) as f64).ln();
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    bp * (log_sum / 4.0).exp()
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of one pair with precision and recall weighted equally.
pub fn rouge_l<T: Eq>(hypothesis: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(hypothesis, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hypothesis.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub scored: usize,
    /// Pairs dropped for an empty reference.
    pub excluded: usize,
}

/// Corpus BLEU-4 and mean per-pair ROUGE-L. Pairs with an empty reference
/// are excluded and counted.
pub fn generation_metrics<T: Eq + Hash + Clone>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<GenerationScores> {
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!("{} hypotheses but {} references", hypotheses.len(), references.len())));
    }
    let (hyps, refs): (Vec<Vec<T>>, Vec<Vec<T>>) =
        hypotheses.iter().zip(references).filter(|(_, r)| !r.is_empty()).map(|(h, r)| (h.clone(), r.clone())).unzip();
    let excluded = hypotheses.len() - hyps.len();
    if hyps.is_empty() {
        return Ok(GenerationScores { bleu4: 0.0, rouge_l: 0.0, scored: 0, excluded });
    }
    let rouge = hyps.iter().zip(&refs).map(|(h, r)| rouge_l(h, r)).sum::<f64>() / hyps.len() as f64;
    Ok(GenerationScores { bleu4: corpus_bleu4(&hyps, &refs), rouge_l: rouge, scored: hyps.len(), excluded })
}

/// Metrics over one slice of a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub label: String,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub f1_macro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: BreakdownRow,
    pub generation: Option<GenerationScores>,
    pub by_subject: Vec<BreakdownRow>,
    pub by_grade: Vec<BreakdownRow>,
}

impl BreakdownRow {
    pub fn compute(label: impl Into<String>, gold: &[usize], pred: &[usize]) -> Result<Self> {
        let (accuracy, f1_macro) = classification_metrics(gold, pred)?;
        let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
        Ok(Self { label: label.into(), count: gold.len(), correct, accuracy, f1_macro })
    }
}

impl MetricReport {
    /// Overall plus per-subject and per-grade rows; `subjects[i]` and
    /// `grades[i]` label item `i`.
    pub fn build(gold: &[usize], pred: &[usize], subjects: &[String], grades: &[String]) -> Result<Self> {
        let overall = BreakdownRow::compute("overall", gold, pred)?;
        let group = |keys: &[String]| -> Result<Vec<BreakdownRow>> {
            let mut order: Vec<&String> = keys.iter().collect();
            order.sort();
            order.dedup();
            order
                .into_iter()
                .map(|k| {
                    let idx: Vec<usize> = (0..keys.len()).filter(|&i| &keys[i] == k).collect();
                    let g: Vec<usize> = idx.iter().map(|&i| gold[i]).collect();
                    let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
                    BreakdownRow::compute(k.clone(), &g, &p)
                })
                .collect()
        };
        Ok(Self { overall, generation: None, by_subject: group(subjects)?, by_grade: group(grades)? })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>6} {:>9} {:>9}", "slice", "items", "accuracy", "f1_macro")?;
        let row = |f: &mut fmt::Formatter<'_>, r: &BreakdownRow| {
            writeln!(f, "{:<18} {:>6} {:>9.4} {:>9.4}", r.label, r.count, r.accuracy, r.f1_macro)
        };
        row(f, &self.overall)?;
        for r in &self.by_subject {
            row(f, r)?;
        }
        for r in &self.by_grade {
            row(f, &BreakdownRow { label: format!("grade {}", r.label), ..r.clone() })?;
        }
        if let Some(gen) = &self.generation {
            write!(f, "BLEU-4 {:.4}  ROUGE-L {:.4}  ({} scored", gen.bleu4, gen.rouge_l, gen.scored)?;
            if gen.excluded > 0 {
                write!(f, ", {} excluded for an empty reference", gen.excluded)?;
            }
            writeln!(f, ")")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn classification_cases() {
        assert_eq!(classification_metrics(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), (1.0, 1.0));
        let (acc, f1) = classification_metrics(&[0, 1, 2, 3], &[0, 0, 0, 0]).unwrap();
        assert_eq!(acc, 0.25);
        assert!((f1 - 0.1).abs() < 1e-12);
        assert_eq!(classification_metrics(&[0, 1, 2, 3], &[1, 2, 3, 0]).unwrap(), (0.0, 0.0));
        assert!(classification_metrics(&[0], &[]).is_err());
    }

    #[test]
    fn generation_identity_and_disjoint() {
        let s = generation_metrics(&[toks("a b c d e")], &[toks("a b c d e")]).unwrap();
        assert!((s.bleu4 - 1.0).abs() < 1e-12 && (s.rouge_l - 1.0).abs() < 1e-12);
        let s = generation_metrics(&[toks("a b c d")], &[toks("w x y z")]).unwrap();
        assert_eq!((s.bleu4, s.rouge_l), (0.0, 0.0));
    }

    #[test]
    fn short_hypothesis_case() {
        let s = generation_metrics(&[toks("a b c d")], &[toks("a b c d e")]).unwrap();
        assert!((s.bleu4 - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-12);
        assert!((s.bleu4 - 0.778801).abs() < 1e-6);
        assert!((s.rouge_l - 0.888889).abs() < 1e-6);
    }

    #[test]
    fn empty_references_are_excluded() {
        let s = generation_metrics(&[toks("a"), toks("b")], &[toks("a"), vec![]]).unwrap();
        assert_eq!((s.scored, s.excluded), (1, 1));
    }

    #[test]
    fn breakdowns_recombine_to_overall() {
        let gold = [0, 1, 2, 3, 0, 1, 2];
        let pred = [0, 1, 0, 3, 1, 1, 2];
        let grades: Vec<String> = ["10", "11", "10", "12", "11", "10", "12"].map(String::from).to_vec();
        let subjects = vec!["history".to_string(); 7];
        let r = MetricReport::build(&gold, &pred, &subjects, &grades).unwrap();
        let weighted: f64 = r.by_grade.iter().map(|g| g.accuracy * g.count as f64).sum::<f64>() / 7.0;
        assert!((weighted - r.overall.accuracy).abs() < 1e-12);
        assert_eq!(r.by_subject.len(), 1);
        assert_eq!(r.by_subject[0].accuracy, r.overall.accuracy);
        assert_eq!(r.by_subject[0].f1_macro, r.overall.f1_macro);
    }
}
