//! Dense retrieval: pluggable embedders and cosine ranking.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RankedList, SentenceUnit};
use crate::data::{SimpleTokenizer, Tokenizer, NUM_OPTIONS};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

/// Maps text to a fixed-dimension vector. Must be deterministic.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String>;
}

/// Bag-of-tokens embedder: every token hashes to a fixed Gaussian vector and
/// a text embeds as the sum over its tokens. Texts sharing tokens get
/// positively correlated vectors, which is all the retrieval tests need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        let mut out = vec![0.0; self.dim];
        for tok in SimpleTokenizer.split(text) {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tok.as_bytes()));
            let v = Matrix::random_normal(1, self.dim, 1.0, &mut rng);
            for (o, x) in out.iter_mut().zip(v.as_slice()) {
                *o += x;
            }
        }
        Ok(out)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Mean of the question embedding and the four option embeddings.
pub fn dense_query_vector(
    query_id: &str,
    question: &str,
    options: &[String; NUM_OPTIONS],
    embedder: &dyn Embedder,
) -> Result<Vec<f64>> {
    let fail = |reason: String| Error::Embedder { query: query_id.to_string(), reason };
    let mut sum = vec![0.0; embedder.dim()];
    for text in std::iter::once(question).chain(options.iter().map(String::as_str)) {
        let v = embedder.embed(text).map_err(fail)?;
        if v.len() != embedder.dim() {
            return Err(fail(format!("embedding has {} dims, expected {}", v.len(), embedder.dim())));
        }
        for (s, x) in sum.iter_mut().zip(&v) {
            *s += x;
        }
    }
    Ok(sum.into_iter().map(|s| s / (1 + NUM_OPTIONS) as f64).collect())
}

/// Unit vectors of one subject partition.
#[derive(Debug, Clone)]
pub struct DenseIndex {
    unit_ids: Vec<u64>,
    vectors: Vec<Vec<f64>>,
}

impl DenseIndex {
    pub fn build(units: &[SentenceUnit], embedder: &dyn Embedder) -> Result<Self> {
        let mut vectors = Vec::with_capacity(units.len());
        for u in units {
            let v = embedder
                .embed(&u.text)
                .map_err(|reason| Error::Embedder { query: format!("unit {}", u.id), reason })?;
            vectors.push(v);
        }
        Ok(Self { unit_ids: units.iter().map(|u| u.id).collect(), vectors })
    }

    /// Uses precomputed vectors; every unit must have one.
    pub fn from_vectors(units: &[SentenceUnit], vectors: &HashMap<u64, Vec<f64>>) -> Result<Self> {
        let mut out = Vec::with_capacity(units.len());
        for u in units {
            out.push(vectors.get(&u.id).cloned().ok_or(Error::UnknownUnit(u.id))?);
        }
        Ok(Self { unit_ids: units.iter().map(|u| u.id).collect(), vectors: out })
    }

    pub fn top_k(&self, query: &[f64], k: usize) -> RankedList {
        let scores = self.unit_ids.iter().zip(&self.vectors).map(|(&id, v)| (id, cosine(query, v))).collect();
        RankedList::from_scores(scores).expect("unit ids are unique").truncated(k)
    }
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    id: u64,
    vector: Vec<f64>,
}

/// Reads a line-delimited `{"id": unit id, "vector": [..]}` file. All vectors
/// must share one dimension.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<HashMap<u64, Vec<f64>>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    let mut dim = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        if *dim.get_or_insert(rec.vector.len()) != rec.vector.len() {
            return Err(Error::Parse(format!("{}:{}: inconsistent vector dimension", path.display(), idx + 1)));
        }
        out.insert(rec.id, rec.vector);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns the i-th standard basis vector for text "e{i}".
    struct Basis;

    impl Embedder for Basis {
        fn dim(&self) -> usize {
            5
        }

        fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
            let i: usize = text.trim_start_matches('e').parse().map_err(|_| format!("bad text {text}"))?;
            let mut v = vec![0.0; 5];
            v[i] = 1.0;
            Ok(v)
        }
    }

    #[test]
    fn orthonormal_embeddings_average_to_one_fifth() {
        let options = ["e1".to_string(), "e2".into(), "e3".into(), "e4".into()];
        let v = dense_query_vector("q", "e0", &options, &Basis).unwrap();
        assert!(v.iter().all(|&x| (x - 0.2).abs() < 1e-15), "{v:?}");
    }

    #[test]
    fn identical_embeddings_average_to_themselves() {
        let options = ["e3".to_string(), "e3".into(), "e3".into(), "e3".into()];
        assert_eq!(dense_query_vector("q", "e3", &options, &Basis).unwrap(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn embedder_failure_names_the_query() {
        let options = ["e1".to_string(), "oops".into(), "e3".into(), "e4".into()];
        let err = dense_query_vector("q42", "e0", &options, &Basis).unwrap_err();
        assert!(err.to_string().contains("q42"));
    }

    #[test]
    fn hash_embedder_is_deterministic_and_sized() {
        let e = HashEmbedder { dim: 16 };
        let a = e.embed("Sông Hồng").unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, e.embed("sông hồng").unwrap());
        assert!(cosine(&a, &e.embed("sông hồng chảy").unwrap()) > cosine(&a, &e.embed("núi cao").unwrap()));
    }
}
