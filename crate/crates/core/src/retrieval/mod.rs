//! Sentence-level context retrieval over a textbook corpus.
//!
//! Documents are split into [`SentenceUnit`]s and indexed per subject. A
//! question is answered with a [`RankedList`] from BM25 ([`SparseIndex`]),
//! from cosine similarity over embeddings ([`DenseIndex`]), or from
//! reciprocal rank fusion of the two ([`rrf_fuse`]). The top units are then
//! concatenated into the item's context with [`build_context`].

mod bm25;
mod dense;
mod eval;
mod fusion;
mod index;

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SimpleTokenizer, Subject, Tokenizer};
use crate::error::{Error, Result};

pub use bm25::{Bm25Params, SparseIndex};
pub use dense::{cosine, dense_query_vector, load_embeddings, DenseIndex, Embedder, HashEmbedder};
pub use eval::{
    load_judgments, retrieval_metrics, evaluate_retrieval, MethodRow, QueryOutcome, RetrievalJudgment, RetrievalReport,
};
pub use fusion::{rrf_fuse, DEFAULT_RRF_K};
pub use index::{CorpusIndex, EmbedderSpec, IndexFile, RetrievalMode};

/// Number of units concatenated into an item's context.
pub const DEFAULT_CONTEXT_K: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceUnit {
    pub id: u64,
    pub subject: Subject,
    pub text: String,
}

impl SentenceUnit {
    pub fn tokens(&self) -> Vec<String> {
        SimpleTokenizer.split(&self.text)
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '…')
}

/// Splits a document into sentences. A sentence ends at a run of
/// terminators (`.`, `!`, `?`, `…`) followed by whitespace or the end of the
/// text, or at a line break. Ids are assigned from `first_id` upwards.
pub fn segment_corpus(document: &str, subject: Subject, first_id: u64) -> Vec<SentenceUnit> {
    let mut units = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = document.char_indices().collect();
    let mut push = |slice: &str| {
        let text = slice.trim();
        if !text.is_empty() {
            units.push(SentenceUnit { id: first_id + units.len() as u64, subject, text: text.to_string() });
        }
    };
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c == '\n' {
            push(&document[start..pos]);
            start = pos + c.len_utf8();
        } else if is_terminator(c) {
            let mut j = i;
            while j + 1 < chars.len() && is_terminator(chars[j + 1].1) {
                j += 1;
            }
            let end = chars[j].0 + chars[j].1.len_utf8();
            if j + 1 == chars.len() || chars[j + 1].1.is_whitespace() {
                push(&document[start..end]);
                start = end;
            }
            i = j;
        }
        i += 1;
    }
    push(&document[start..]);
    units
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<SentenceUnit>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut units: Vec<SentenceUnit> = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let unit: SentenceUnit =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        if unit.text.trim().is_empty() {
            return Err(Error::Parse(format!("{}:{}: unit {} has empty text", path.display(), idx + 1, unit.id)));
        }
        if !seen.insert(unit.id) {
            return Err(Error::Parse(format!("{}:{}: duplicate unit id {}", path.display(), idx + 1, unit.id)));
        }
        units.push(unit);
    }
    Ok(units)
}

pub fn write_corpus(path: impl AsRef<Path>, units: &[SentenceUnit]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for u in units {
        out.push_str(&serde_json::to_string(u).expect("units serialize"));
        out.push('\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(|e| Error::io(path, e))
}

/// Retrieval results ordered by descending score, ties by ascending id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    entries: Vec<(u64, f64)>,
}

/// Descending score, then ascending id.
pub(crate) fn rank_order(a: &(u64, f64), b: &(u64, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

impl RankedList {
    /// Sorts arbitrary `(unit id, score)` pairs. Ids must be unique.
    pub fn from_scores(mut entries: Vec<(u64, f64)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        if let Some((id, _)) = entries.iter().find(|(id, _)| !seen.insert(*id)) {
            return Err(Error::Invalid(format!("unit {id} ranked twice")));
        }
        entries.sort_by(rank_order);
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(u64, f64)] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|(id, _)| *id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncated(&self, k: usize) -> RankedList {
        RankedList { entries: self.entries[..k.min(self.entries.len())].to_vec() }
    }
}

/// Concatenates the top-`k` unit texts in rank order, cut to `cap` tokens.
/// The flag is true when there was nothing to build from.
pub fn build_context(results: &RankedList, units: &[SentenceUnit], k: usize, cap: usize) -> Result<(String, bool)> {
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    if results.is_empty() {
        return Ok((String::new(), true));
    }
    let by_id: std::collections::HashMap<u64, &SentenceUnit> = units.iter().map(|u| (u.id, u)).collect();
    let mut texts = Vec::new();
    for id in results.ids().take(k) {
        let unit = by_id.get(&id).ok_or(Error::UnknownUnit(id))?;
        texts.push(unit.text.as_str());
    }
    let joined = texts.join(" ");
    Ok((SimpleTokenizer.prefix_tokens(&joined, cap).to_string(), false))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_sentences() {
        let units = segment_corpus("A. B. C.", Subject::History, 0);
        assert_eq!(units.iter().map(|u| u.text.as_str()).collect::<Vec<_>>(), ["A.", "B.", "C."]);
        assert!(units.iter().all(|u| u.subject == Subject::History));
    }

    #[test]
    fn unterminated_sentence_is_one_unit() {
        assert_eq!(segment_corpus("no terminator here", Subject::Geography, 5).len(), 1);
        assert!(segment_corpus("", Subject::Geography, 0).is_empty());
    }

    #[test]
    fn counts_terminators_on_fixture() {
        // Five terminator runs, counted by hand; "3.5" and "..." do not split
        // mid-token.
        let doc = "Sông Hồng dài 3.5 nghìn km. Nó chảy qua Hà Nội! Vì sao? \
                   Đồng bằng được bồi đắp... Cuối cùng là biển.";
        let units = segment_corpus(doc, Subject::Geography, 0);
        assert_eq!(units.len(), 5);
        let rebuilt: String = units.iter().map(|u| u.text.as_str()).collect::<Vec<_>>().join(" ");
        assert_eq!(rebuilt.split_whitespace().collect::<Vec<_>>(), doc.split_whitespace().collect::<Vec<_>>());
    }

    #[test]
    fn ranked_list_orders_and_breaks_ties_by_id() {
        let list = RankedList::from_scores(vec![(5, 1.0), (2, 3.0), (1, 1.0)]).unwrap();
        assert_eq!(list.ids().collect::<Vec<_>>(), [2, 1, 5]);
        assert!(RankedList::from_scores(vec![(1, 1.0), (1, 2.0)]).is_err());
    }

    fn unit(id: u64, words: usize) -> SentenceUnit {
        SentenceUnit {
            id,
            subject: Subject::History,
            text: (0..words).map(|i| format!("w{id}x{i}")).collect::<Vec<_>>().join(" "),
        }
    }

    #[test]
    fn context_within_cap_keeps_all_units() {
        let units = vec![unit(1, 10), unit(2, 10)];
        let list = RankedList::from_scores(vec![(1, 2.0), (2, 1.0)]).unwrap();
        let (ctx, flagged) = build_context(&list, &units, DEFAULT_CONTEXT_K, 400).unwrap();
        assert!(!flagged);
        assert_eq!(SimpleTokenizer.split(&ctx).len(), 20);
        assert!(ctx.starts_with("w1x0"));
    }

    #[test]
    fn context_over_cap_is_cut_to_exactly_cap_tokens() {
        let units: Vec<_> = (0..15).map(|i| unit(i, 30)).collect();
        let list = RankedList::from_scores(units.iter().map(|u| (u.id, 1.0 / (u.id + 1) as f64)).collect()).unwrap();
        let (ctx, _) = build_context(&list, &units, 15, 400).unwrap();
        assert_eq!(SimpleTokenizer.split(&ctx).len(), 400);
    }

    #[test]
    fn empty_results_are_flagged() {
        let (ctx, flagged) = build_context(&RankedList::default(), &[], 15, 400).unwrap();
        assert!(ctx.is_empty() && flagged);
    }
}
