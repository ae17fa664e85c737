//! Okapi BM25 over one subject partition.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{RankedList, SentenceUnit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Inverted statistics for BM25 scoring.
#[derive(Debug, Clone)]
pub struct SparseIndex {
    params: Bm25Params,
    doc_freq: HashMap<String, usize>,
    term_freqs: Vec<HashMap<String, usize>>,
    lengths: Vec<usize>,
    unit_ids: Vec<u64>,
    position: HashMap<u64, usize>,
    avg_len: f64,
}

impl SparseIndex {
    pub fn build(units: &[SentenceUnit], params: Bm25Params) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut term_freqs = Vec::with_capacity(units.len());
        let mut lengths = Vec::with_capacity(units.len());
        for unit in units {
            let tokens = unit.tokens();
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            lengths.push(tokens.len());
            term_freqs.push(tf);
        }
        let avg_len = if units.is_empty() { 0.0 } else { lengths.iter().sum::<usize>() as f64 / units.len() as f64 };
        let unit_ids: Vec<u64> = units.iter().map(|u| u.id).collect();
        let position = unit_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Self { params, doc_freq, term_freqs, lengths, unit_ids, position, avg_len }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn unit_count(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    /// `ln((N − df + 0.5) / (df + 0.5) + 1)`; always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.unit_count() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn score_at(&self, pos: usize, query: &[String]) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf_map = &self.term_freqs[pos];
        let len_norm = if self.avg_len > 0.0 { self.lengths[pos] as f64 / self.avg_len } else { 0.0 };
        query
            .iter()
            .filter_map(|term| {
                let tf = *tf_map.get(term)? as f64;
                Some(self.idf(term) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_norm)))
            })
            .sum()
    }

    /// BM25 score of one unit for the query tokens. Repeated query tokens
    /// contribute once per occurrence.
    pub fn score(&self, query: &[String], unit_id: u64) -> Result<f64> {
        let pos = *self.position.get(&unit_id).ok_or(Error::UnknownUnit(unit_id))?;
        Ok(self.score_at(pos, query))
    }

    /// Every unit in the partition, ranked; the first `k` are kept.
    pub fn top_k(&self, query: &[String], k: usize) -> RankedList {
        let scores = (0..self.unit_count()).map(|pos| (self.unit_ids[pos], self.score_at(pos, query))).collect();
        RankedList::from_scores(scores).expect("unit ids are unique").truncated(k)
    }
}
