use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{dense_query_vector, rrf_fuse, Bm25Params, DenseIndex, Embedder, HashEmbedder, RankedList, SentenceUnit, SparseIndex, DEFAULT_RRF_K};
use crate::data::{SimpleTokenizer, Subject, Tokenizer, NUM_OPTIONS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Sparse,
    Dense,
    Rrf,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 3] = [RetrievalMode::Sparse, RetrievalMode::Dense, RetrievalMode::Rrf];

    pub fn label(self) -> &'static str {
        match self {
            RetrievalMode::Sparse => "BM25",
            RetrievalMode::Dense => "Dense",
            RetrievalMode::Rrf => "BM25+Dense (RRF)",
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalMode::Sparse => "sparse",
            RetrievalMode::Dense => "dense",
            RetrievalMode::Rrf => "rrf",
        })
    }
}

impl FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sparse" | "bm25" => Ok(RetrievalMode::Sparse),
            "dense" => Ok(RetrievalMode::Dense),
            "rrf" | "hybrid" => Ok(RetrievalMode::Rrf),
            other => Err(Error::Parse(format!("unknown retrieval mode {other:?}"))),
        }
    }
}

/// How query (and, absent precomputed vectors, unit) embeddings are made.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbedderSpec {
    Hash { dim: usize },
}

impl EmbedderSpec {
    fn build(self) -> Box<dyn Embedder> {
        match self {
            EmbedderSpec::Hash { dim } => Box::new(HashEmbedder { dim }),
        }
    }
}

/// On-disk form of a [`CorpusIndex`]. Statistics are rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexFile {
    pub units: Vec<SentenceUnit>,
    pub bm25: Bm25Params,
    pub embedder: EmbedderSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_vectors: Option<BTreeMap<u64, Vec<f64>>>,
}

struct Partition {
    units: Vec<SentenceUnit>,
    sparse: SparseIndex,
    dense: DenseIndex,
}

/// Per-subject sparse and dense indexes. Immutable once built.
pub struct CorpusIndex {
    file: IndexFile,
    partitions: BTreeMap<Subject, Partition>,
    embedder: Box<dyn Embedder>,
}

impl CorpusIndex {
    pub fn build(units: Vec<SentenceUnit>, bm25: Bm25Params, embedder: EmbedderSpec) -> Result<Self> {
        Self::from_file(IndexFile { units, bm25, embedder, unit_vectors: None })
    }

    /// Uses precomputed unit vectors for the dense side.
    pub fn with_vectors(
        units: Vec<SentenceUnit>,
        bm25: Bm25Params,
        embedder: EmbedderSpec,
        vectors: HashMap<u64, Vec<f64>>,
    ) -> Result<Self> {
        Self::from_file(IndexFile { units, bm25, embedder, unit_vectors: Some(vectors.into_iter().collect()) })
    }

    pub fn from_file(file: IndexFile) -> Result<Self> {
        let embedder = file.embedder.build();
        let mut by_subject: BTreeMap<Subject, Vec<SentenceUnit>> = BTreeMap::new();
        for u in &file.units {
            by_subject.entry(u.subject).or_default().push(u.clone());
        }
        let vectors: Option<HashMap<u64, Vec<f64>>> =
            file.unit_vectors.as_ref().map(|v| v.iter().map(|(k, v)| (*k, v.clone())).collect());
        let mut partitions = BTreeMap::new();
        for (subject, units) in by_subject {
            let sparse = SparseIndex::build(&units, file.bm25);
            let dense = match &vectors {
                Some(v) => DenseIndex::from_vectors(&units, v)?,
                None => DenseIndex::build(&units, embedder.as_ref())?,
            };
            partitions.insert(subject, Partition { units, sparse, dense });
        }
        Ok(Self { file, partitions, embedder })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: IndexFile = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.file).expect("index serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn units(&self) -> &[SentenceUnit] {
        &self.file.units
    }

    pub fn subject_units(&self, subject: Subject) -> &[SentenceUnit] {
        self.partitions.get(&subject).map_or(&[], |p| &p.units)
    }

    pub fn sparse(&self, subject: Subject) -> Option<&SparseIndex> {
        self.partitions.get(&subject).map(|p| &p.sparse)
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    /// Sparse query tokens: the question followed by all four options.
    pub fn sparse_query(question: &str, options: &[String; NUM_OPTIONS]) -> Vec<String> {
        let mut tokens = SimpleTokenizer.split(question);
        for o in options {
            tokens.extend(SimpleTokenizer.split(o));
        }
        tokens
    }

    /// Top-`k` units of the question's subject partition.
    pub fn retrieve(
        &self,
        query_id: &str,
        question: &str,
        options: &[String; NUM_OPTIONS],
        subject: Subject,
        k: usize,
        mode: RetrievalMode,
    ) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::Invalid("K must be at least 1".into()));
        }
        let Some(part) = self.partitions.get(&subject) else {
            return Ok(RankedList::default());
        };
        let everything = part.units.len();
        let sparse = || part.sparse.top_k(&Self::sparse_query(question, options), everything);
        let dense = || -> Result<RankedList> {
            let v = dense_query_vector(query_id, question, options, self.embedder.as_ref())?;
            Ok(part.dense.top_k(&v, everything))
        };
        let full = match mode {
            RetrievalMode::Sparse => sparse(),
            RetrievalMode::Dense => dense()?,
            RetrievalMode::Rrf => rrf_fuse(&[sparse(), dense()?], DEFAULT_RRF_K)?,
        };
        Ok(full.truncated(k))
    }
}
