//! Reciprocal rank fusion.

use std::collections::HashMap;

use super::RankedList;
use crate::error::{Error, Result};

pub const DEFAULT_RRF_K: u32 = 60;

/// Fuses rankings with `score(u) = Σ 1 / (k_rrf + rank)`, ranks from 1.
///
/// Each unit's contributions are summed smallest first, so the fused scores
/// (and therefore the order) do not depend on the order of `lists`.
pub fn rrf_fuse(lists: &[RankedList], k_rrf: u32) -> Result<RankedList> {
    if lists.len() < 2 {
        return Err(Error::Invalid(format!("fusion needs at least 2 lists, got {}", lists.len())));
    }
    if k_rrf < 1 {
        return Err(Error::Invalid("k_rrf must be at least 1".into()));
    }
    let mut parts: HashMap<u64, Vec<f64>> = HashMap::new();
    for list in lists {
        for (rank0, id) in list.ids().enumerate() {
            parts.entry(id).or_default().push(1.0 / (k_rrf as f64 + rank0 as f64 + 1.0));
        }
    }
    let scores = parts
        .into_iter()
        .map(|(id, mut contributions)| {
            contributions.sort_by(f64::total_cmp);
            (id, contributions.iter().sum())
        })
        .collect();
    RankedList::from_scores(scores)
}
