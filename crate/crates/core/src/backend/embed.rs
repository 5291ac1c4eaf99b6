use serde::{Deserialize, Serialize};

pub const DEFAULT_DIMENSION: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub zero_flag: bool,
}

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two embeddings. Zero vectors have similarity 0 with
/// everything.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    if a.zero_flag || b.zero_flag || a.values.len() != b.values.len() {
        return 0.0;
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        (dot / denom).clamp(-1.0, 1.0)
    }
}

pub trait TextEmbedder: Send + Sync {
    fn id(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> EmbeddingVector;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dimension: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dimension: DEFAULT_DIMENSION }
    }
}

impl TextEmbedder for HashEmbedder {
    fn id(&self) -> String {
        "fnv1a-signed-hash/v1".to_string()
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        hash_embed(text, self.dimension)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
}

/// Signed feature hashing of lowercase tokens into `dimension` buckets,
/// L2-normalised. Tokens are whitespace-separated with surrounding
/// punctuation stripped.
pub fn hash_embed(text: &str, dimension: usize) -> EmbeddingVector {
    assert!(dimension >= 8, "embedding dimension must be at least 8");
    let mut values = vec![0.0f64; dimension];
    let mut any = false;
    for token in tokens(text) {
        let h = fnv1a64(token.as_bytes());
        let index = (h % dimension as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        values[index] += sign;
        any = true;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !any || norm == 0.0 {
        // Tokens can cancel out in a bucket; that still counts as zero.
        return EmbeddingVector { values: vec![0.0; dimension], zero_flag: true };
    }
    for v in &mut values {
        *v /= norm;
    }
    EmbeddingVector { values, zero_flag: false }
}
