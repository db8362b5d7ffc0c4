//! Unit-normalized feature vectors and the double-precision kernels shared by
//! every similarity computation in the crate.

use serde::{Deserialize, Serialize};

use super::EncodeError;

/// Dense feature vector stored in single precision.
///
/// Values are always finite. Vectors produced by [`normalize`] or by an encoder
/// have unit L2 norm within `1e-6`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wraps already-normalized values without rescaling them.
    ///
    /// Used when loading persisted vectors; callers that hold raw features
    /// should go through [`normalize`].
    pub fn from_normalized(values: Vec<f32>) -> Result<Self, EncodeError> {
        if values.is_empty() {
            return Err(EncodeError::ZeroVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EncodeError::NonFinite);
        }
        Ok(Self(values))
    }

    /// Wraps values that may be an all-zero block (used for disabled fusion
    /// branches). Finite check still applies.
    pub(crate) fn from_raw_unchecked(values: Vec<f32>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        squared_norm(&self.0).sqrt()
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Scales `raw` to unit L2 norm. Norm accumulation happens in `f64`.
pub fn normalize(raw: &[f64]) -> Result<EmbeddingVector, EncodeError> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(EncodeError::NonFinite);
    }
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if raw.is_empty() || norm == 0.0 {
        return Err(EncodeError::ZeroVector);
    }
    Ok(EmbeddingVector(raw.iter().map(|v| (v / norm) as f32).collect()))
}

/// [`normalize`] for single-precision input.
pub fn normalize_f32(raw: &[f32]) -> Result<EmbeddingVector, EncodeError> {
    let wide: Vec<f64> = raw.iter().map(|&v| f64::from(v)).collect();
    normalize(&wide)
}

/// Dot product accumulated in `f64` with four independent partial sums.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += f64::from(a[j]) * f64::from(b[j]);
        acc[1] += f64::from(a[j + 1]) * f64::from(b[j + 1]);
        acc[2] += f64::from(a[j + 2]) * f64::from(b[j + 2]);
        acc[3] += f64::from(a[j + 3]) * f64::from(b[j + 3]);
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += f64::from(a[j]) * f64::from(b[j]);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn squared_norm(a: &[f32]) -> f64 {
    dot(a, a)
}

/// `(a . b, b . b)` in one pass, accumulated exactly as [`dot`] does.
#[inline]
fn dot_and_norm(a: &[f32], b: &[f32]) -> (f64, f64) {
    let mut ab = [0.0f64; 4];
    let mut bb = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        for l in 0..4 {
            let (x, y) = (f64::from(a[j + l]), f64::from(b[j + l]));
            ab[l] += x * y;
            bb[l] += y * y;
        }
    }
    let (mut ab_tail, mut bb_tail) = (0.0, 0.0);
    for j in chunks * 4..a.len() {
        let (x, y) = (f64::from(a[j]), f64::from(b[j]));
        ab_tail += x * y;
        bb_tail += y * y;
    }
    (
        (ab[0] + ab[1]) + (ab[2] + ab[3]) + ab_tail,
        (bb[0] + bb[1]) + (bb[2] + bb[3]) + bb_tail,
    )
}

/// Cosine similarity in `f64`, clamped to `[-1, 1]`.
///
/// For `a == b` this is exactly `1.0`: the denominator is `sqrt(d * d)` with
/// `d` the same accumulated dot product, which rounds back to `d`.
/// Returns `0.0` if either side is all zeros.
#[inline]
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    cosine_with_norm(a, squared_norm(a), b)
}

/// [`cosine`] with `a`'s squared norm supplied, for scoring one query
/// against many keys.
#[inline]
pub fn cosine_with_norm(a: &[f32], aa: f64, b: &[f32]) -> f64 {
    let (ab, bb) = dot_and_norm(a, b);
    let denom = (aa * bb).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (ab / denom).clamp(-1.0, 1.0)
}
