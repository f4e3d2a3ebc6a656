use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use super::AnnotateError;
use crate::seed::fnv1a64;

/// Unit-length embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalizes `values`. Fails on non-finite entries or a zero vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self, AnnotateError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AnnotateError::Embedding("non-finite component".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(AnnotateError::Embedding("zero vector cannot be normalized".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub trait Embedder {
    fn embed(&self, id: &str, text: &str) -> Result<EmbeddingVector, AnnotateError>;
}

/// Signed hashing of character n-gram counts into a fixed number of buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedNgramEmbedder {
    pub dimension: usize,
    pub n: usize,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self { dimension: 256, n: 3 }
    }
}

impl HashedNgramEmbedder {
    pub fn new(dimension: usize, n: usize) -> Result<Self, AnnotateError> {
        if dimension == 0 || n == 0 {
            return Err(AnnotateError::InvalidConfig(
                "embedding dimension and n-gram size must be positive".into(),
            ));
        }
        Ok(Self { dimension, n })
    }
}

impl Embedder for HashedNgramEmbedder {
    fn embed(&self, id: &str, text: &str) -> Result<EmbeddingVector, AnnotateError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(AnnotateError::EmptyText(id.to_owned()));
        }
        let chars: Vec<char> = text.chars().collect();
        let mut counts = vec![0.0; self.dimension];
        let mut add = |gram: &[char]| {
            let s: String = gram.iter().collect();
            let h = fnv1a64(s.as_bytes());
            let bucket = (h % self.dimension as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            counts[bucket] += sign;
        };
        if chars.len() < self.n {
            add(&chars);
        } else {
            chars.windows(self.n).for_each(&mut add);
        }
        EmbeddingVector::normalized(counts).map_err(|e| match e {
            AnnotateError::Embedding(msg) => AnnotateError::Embedding(format!("{id}: {msg}")),
            other => other,
        })
    }
}

#[derive(Deserialize)]
struct VectorLine {
    id: String,
    vector: Vec<f64>,
}

/// Precomputed vectors keyed by sample id, from JSONL `{"id", "vector"}`.
#[derive(Debug, Clone, Default)]
pub struct FileEmbedder {
    vectors: HashMap<String, EmbeddingVector>,
}

impl FileEmbedder {
    pub fn load(path: &Path) -> Result<Self, AnnotateError> {
        let file = File::open(path).map_err(|e| AnnotateError::io(path, e))?;
        let mut vectors = HashMap::new();
        let mut dimension = None;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| AnnotateError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: VectorLine = serde_json::from_str(&line).map_err(|e| {
                AnnotateError::Embedding(format!("{}:{}: {e}", path.display(), idx + 1))
            })?;
            let dim = *dimension.get_or_insert(parsed.vector.len());
            if parsed.vector.len() != dim {
                return Err(AnnotateError::Embedding(format!(
                    "{}:{}: vector has dimension {}, expected {dim}",
                    path.display(),
                    idx + 1,
                    parsed.vector.len()
                )));
            }
            vectors.insert(parsed.id, EmbeddingVector::normalized(parsed.vector)?);
        }
        Ok(Self { vectors })
    }

    pub fn from_vectors(vectors: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self, AnnotateError> {
        Ok(Self {
            vectors: vectors
                .into_iter()
                .map(|(id, v)| Ok((id, EmbeddingVector::normalized(v)?)))
                .collect::<Result<_, AnnotateError>>()?,
        })
    }
}

impl Embedder for FileEmbedder {
    fn embed(&self, id: &str, _text: &str) -> Result<EmbeddingVector, AnnotateError> {
        self.vectors
            .get(id)
            .cloned()
            .ok_or_else(|| AnnotateError::Embedding(format!("no precomputed vector for {id:?}")))
    }
}
