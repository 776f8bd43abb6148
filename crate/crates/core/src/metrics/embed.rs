//! Embedding-space metrics and the bundled synthetic embedder.

use serde::{Deserialize, Serialize};

use super::{tokenize_for_metrics, MetricsError};

/// Dimension of [`SyntheticEmbedder`] vectors.
pub const SYNTHETIC_DIM: usize = 256;

const UNIT_TOLERANCE: f64 = 1e-9;

/// A unit-norm real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, MetricsError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NotUnit(f64::NAN));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(MetricsError::NotUnit(norm));
        }
        Ok(Self(values))
    }

    /// Scales `values` to unit length; a zero vector is rejected.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, MetricsError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(MetricsError::NotUnit(norm));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Self) -> Result<f64, MetricsError> {
        if self.dim() != other.dim() {
            return Err(MetricsError::DimensionMismatch(self.dim(), other.dim()));
        }
        let dot = crate::numeric::sum(self.0.iter().zip(&other.0).map(|(a, b)| a * b));
        Ok(dot.clamp(-1.0, 1.0))
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = MetricsError;
    fn try_from(v: Vec<f64>) -> Result<Self, MetricsError> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Maps text to the shared caption/image embedding space.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> EmbeddingVector;
}

/// Deterministic hashed bag of word unigrams and bigrams.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticEmbedder;

impl Embedder for SyntheticEmbedder {
    fn dim(&self) -> usize {
        SYNTHETIC_DIM
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        synthetic_embed(text)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed feature hashing into [`SYNTHETIC_DIM`] buckets, then L2
/// normalization. Text with no tokens maps to the first basis vector.
pub fn synthetic_embed(text: &str) -> EmbeddingVector {
    let tokens = tokenize_for_metrics(text);
    let mut v = vec![0.0f64; SYNTHETIC_DIM];
    if tokens.is_empty() {
        v[0] = 1.0;
        return EmbeddingVector(v);
    }
    // unigram and bigram features are kept apart by a tag byte
    let mut add = |feature: String| {
        let h = fnv1a(feature.as_bytes());
        let bucket = (h % SYNTHETIC_DIM as u64) as usize;
        let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    };
    for t in &tokens {
        add(format!("1\u{1f}{t}"));
    }
    for w in tokens.windows(2) {
        add(format!("2\u{1f}{}\u{1f}{}", w[0], w[1]));
    }
    // hash collisions can cancel every feature
    EmbeddingVector::normalized(v).unwrap_or_else(|_| {
        let mut e = vec![0.0; SYNTHETIC_DIM];
        e[0] = 1.0;
        EmbeddingVector(e)
    })
}

/// `2.5 · max(cos(c, v), 0)`.
pub fn embed_score(caption: &EmbeddingVector, image: &EmbeddingVector) -> Result<f64, MetricsError> {
    Ok(2.5 * caption.cosine(image)?.max(0.0))
}

/// Best text-to-text cosine against any reference, clamped at zero.
pub fn ref_only_score(caption: &EmbeddingVector, references: &[EmbeddingVector]) -> Result<f64, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::NoReferences(0));
    }
    let mut best = 0.0f64;
    for r in references {
        best = best.max(caption.cosine(r)?);
    }
    Ok(best)
}

/// Harmonic mean of the embedding score and the reference-only score.
pub fn ref_combined_score(embed_s: f64, ref_only_s: f64) -> Result<f64, MetricsError> {
    if !(embed_s >= 0.0 && ref_only_s >= 0.0) || !embed_s.is_finite() || !ref_only_s.is_finite() {
        return Err(MetricsError::Negative(embed_s.min(ref_only_s)));
    }
    if embed_s == 0.0 || ref_only_s == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * embed_s * ref_only_s / (embed_s + ref_only_s))
}

/// Fraction of captions whose paired image is among the `k` nearest images.
/// Images are ranked by cosine, ties going to the lower index.
pub fn recall_at_k(
    captions: &[EmbeddingVector],
    images: &[EmbeddingVector],
    ks: &[usize],
) -> Result<Vec<(usize, f64)>, MetricsError> {
    let n = captions.len();
    if images.len() != n {
        return Err(MetricsError::LengthMismatch { candidates: n, references: images.len() });
    }
    if let Some(&k) = ks.iter().find(|&&k| k > n || k == 0) {
        return Err(MetricsError::InvalidK { k, n });
    }
    let mut ranks = Vec::with_capacity(n);
    for (i, c) in captions.iter().enumerate() {
        let sims = images.iter().map(|im| c.cosine(im)).collect::<Result<Vec<_>, _>>()?;
        let own = sims[i];
        // 1-based rank of the true image under the tie rule
        let rank = 1 + sims.iter().enumerate().filter(|&(j, &s)| s > own || (s == own && j < i)).count();
        ranks.push(rank);
    }
    Ok(ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_embed_is_unit_and_deterministic() {
        let a = synthetic_embed("a black dog");
        assert_eq!(a, synthetic_embed("A black dog!"));
        assert!((a.cosine(&a).unwrap() - 1.0).abs() < 1e-12);
        let e = synthetic_embed("");
        assert_eq!(e.values()[0], 1.0);
        assert!(synthetic_embed("dog black a").cosine(&a).unwrap() < 1.0);
    }

    #[test]
    fn embed_score_clamps() {
        let x = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let y = EmbeddingVector::new(vec![0.31, (1.0f64 - 0.31 * 0.31).sqrt()]).unwrap();
        let z = EmbeddingVector::new(vec![-0.2, (1.0f64 - 0.04).sqrt()]).unwrap();
        assert_eq!(embed_score(&x, &x).unwrap(), 2.5);
        assert!((embed_score(&x, &y).unwrap() - 0.775).abs() < 1e-12);
        assert_eq!(embed_score(&x, &z).unwrap(), 0.0);
        assert!(EmbeddingVector::new(vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn harmonic_mean() {
        assert!((ref_combined_score(0.8, 0.8).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(ref_combined_score(0.0, 0.7).unwrap(), 0.0);
        assert!((ref_combined_score(0.808, 0.862).unwrap() - 0.8341).abs() < 1e-4);
        assert!(ref_combined_score(-0.1, 0.5).is_err());
    }

    #[test]
    fn recall_tie_rule() {
        let same = vec![synthetic_embed("x"); 4];
        let caps: Vec<_> = ["a", "b", "c", "d"].iter().map(|t| synthetic_embed(t)).collect();
        let r = recall_at_k(&caps, &same, &[1, 4]).unwrap();
        assert_eq!(r, vec![(1, 0.25), (4, 1.0)]);
        assert_eq!(recall_at_k(&caps, &caps, &[1]).unwrap(), vec![(1, 1.0)]);
        assert!(matches!(recall_at_k(&caps, &caps, &[5]), Err(MetricsError::InvalidK { .. })));
    }
}
