//! Precision@K / Recall@K against lesson-level relevance judgments.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusIndex, RankedList, RetrievalMode};
use crate::data::McqItem;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalJudgment {
    pub query_id: String,
    pub relevant: BTreeSet<u64>,
}

pub fn load_judgments(path: impl AsRef<Path>) -> Result<Vec<RetrievalJudgment>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), idx + 1)))?);
    }
    Ok(out)
}

/// Number of relevant units among the first `k` results.
fn hits_at(results: &RankedList, relevant: &BTreeSet<u64>, k: usize) -> usize {
    results.ids().take(k).filter(|id| relevant.contains(id)).count()
}

/// `(P@K, R@K)`. An empty relevant set cannot be scored and is an error, so
/// the caller can exclude and flag the query.
pub fn retrieval_metrics(results: &RankedList, judgment: &RetrievalJudgment, k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    if judgment.relevant.is_empty() {
        return Err(Error::Invalid(format!("query {} has no relevant units", judgment.query_id)));
    }
    let hits = hits_at(results, &judgment.relevant, k) as f64;
    Ok((hits / k as f64, hits / judgment.relevant.len() as f64))
}

/// One query scored by one method at one cutoff.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub mode: RetrievalMode,
    pub k: usize,
    pub hits: usize,
    pub relevant: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Mean P@K and R@K of one method across queries, aligned with `k_list`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRow {
    pub mode: RetrievalMode,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub k_list: Vec<usize>,
    pub rows: Vec<MethodRow>,
    pub per_query: Vec<QueryOutcome>,
    /// Queries skipped for an empty relevant set or a missing item.
    pub excluded: Vec<String>,
    pub evaluated: usize,
}

/// Scores every judged query with each mode at each cutoff.
pub fn evaluate_retrieval(
    index: &CorpusIndex,
    items: &[McqItem],
    judgments: &[RetrievalJudgment],
    k_list: &[usize],
    modes: &[RetrievalMode],
) -> Result<RetrievalReport> {
    let max_k = *k_list.iter().max().ok_or_else(|| Error::Invalid("empty K list".into()))?;
    if k_list.contains(&0) {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    let by_id: HashMap<&str, &McqItem> = items.iter().map(|it| (it.id.as_str(), it)).collect();
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    let mut sums: Vec<(Vec<f64>, Vec<f64>)> = modes.iter().map(|_| (vec![0.0; k_list.len()], vec![0.0; k_list.len()])).collect();
    let mut evaluated = 0;
    for judgment in judgments {
        let item = match by_id.get(judgment.query_id.as_str()) {
            Some(item) if !judgment.relevant.is_empty() => item,
            _ => {
                excluded.push(judgment.query_id.clone());
                continue;
            }
        };
        evaluated += 1;
        for (m, &mode) in modes.iter().enumerate() {
            let results = index.retrieve(&item.id, &item.question, &item.options, item.subject, max_k, mode)?;
            for (ki, &k) in k_list.iter().enumerate() {
                let (p, r) = retrieval_metrics(&results, judgment, k)?;
                sums[m].0[ki] += p;
                sums[m].1[ki] += r;
                per_query.push(QueryOutcome {
                    query_id: judgment.query_id.clone(),
                    mode,
                    k,
                    hits: hits_at(&results, &judgment.relevant, k),
                    relevant: judgment.relevant.len(),
                    precision: p,
                    recall: r,
                });
            }
        }
    }
    let denom = evaluated.max(1) as f64;
    let rows = modes
        .iter()
        .zip(sums)
        .map(|(&mode, (p, r))| MethodRow {
            mode,
            precision: p.into_iter().map(|v| v / denom).collect(),
            recall: r.into_iter().map(|v| v / denom).collect(),
        })
        .collect();
    Ok(RetrievalReport { k_list: k_list.to_vec(), rows, per_query, excluded, evaluated })
}

impl fmt::Display for RetrievalReport {
    /// Percentages, one row per retriever, a P/R column pair per cutoff.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<18}", "Retriever")?;
        for k in &self.k_list {
            write!(f, " | {:>7} {:>7}", format!("P@{k}"), format!("R@{k}"))?;
        }
        writeln!(f)?;
        writeln!(f, "{}", "-".repeat(18 + self.k_list.len() * 18))?;
        for row in &self.rows {
            write!(f, "{:<18}", row.mode.label())?;
            for (p, r) in row.precision.iter().zip(&row.recall) {
                write!(f, " | {:>7.2} {:>7.2}", p * 100.0, r * 100.0)?;
            }
            writeln!(f)?;
        }
        write!(f, "queries evaluated: {}", self.evaluated)?;
        if !self.excluded.is_empty() {
            write!(f, "; excluded (no relevant units or unknown id): {}", self.excluded.join(", "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn judgment(ids: &[u64]) -> RetrievalJudgment {
        RetrievalJudgment { query_id: "q".into(), relevant: ids.iter().copied().collect() }
    }

    fn list(ids: &[u64]) -> RankedList {
        RankedList::from_scores(ids.iter().enumerate().map(|(i, &id)| (id, -(i as f64))).collect()).unwrap()
    }

    #[test]
    fn one_hit_in_three() {
        let (p, r) = retrieval_metrics(&list(&[1, 2, 3]), &judgment(&[1]), 3).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn no_overlap() {
        assert_eq!(retrieval_metrics(&list(&[1, 2, 3]), &judgment(&[9]), 3).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn full_coverage() {
        assert_eq!(retrieval_metrics(&list(&[4, 5, 6, 7]), &judgment(&[4, 5, 6]), 3).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn empty_judgment_is_flagged() {
        assert!(retrieval_metrics(&list(&[1]), &judgment(&[]), 1).is_err());
    }
}
