//! Affinity-based retrieval over a gallery.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{cosine_with_norm, squared_norm, EmbeddingVector};
use crate::gallery::Gallery;

pub const DEFAULT_BETA: f64 = 5.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Class of the single most similar entry.
    Nearest,
    /// Class with the largest summed affinity.
    #[default]
    ClassSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub beta: f64,
    pub aggregation: Aggregation,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            aggregation: Aggregation::ClassSum,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RetrievalError {
    #[error("query has dimension {got}, gallery has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("beta must be finite and non-negative, got {0}")]
    InvalidBeta(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedClass {
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityResult {
    /// `(sample_id, affinity)` in gallery order.
    pub per_entry: Vec<(String, f64)>,
    pub per_class: BTreeMap<String, f64>,
    pub predicted_label: String,
    /// Top score minus runner-up; the top score when there is one class.
    pub margin: f64,
    /// Every class, best first.
    pub ranked: Vec<RankedClass>,
}

/// `exp(-beta * (1 - cos))`.
pub fn affinity(cos: f64, beta: f64) -> f64 {
    (-beta * (1.0 - cos)).exp()
}

/// Scores `query` against every gallery entry and predicts a label.
///
/// Ties are broken by ascending label.
pub fn classify(
    query: &EmbeddingVector,
    gallery: &Gallery,
    cfg: &RetrievalConfig,
) -> Result<AffinityResult, RetrievalError> {
    if !(cfg.beta.is_finite() && cfg.beta >= 0.0) {
        return Err(RetrievalError::InvalidBeta(cfg.beta));
    }
    if gallery.is_empty() {
        return Err(RetrievalError::EmptyGallery);
    }
    let expected = gallery.metadata.dim();
    if query.dim() != expected {
        return Err(RetrievalError::DimensionMismatch {
            expected,
            got: query.dim(),
        });
    }
    let q = query.as_slice();
    let qq = squared_norm(q);
    let per_entry: Vec<(String, f64)> = gallery
        .entries()
        .iter()
        .map(|e| {
            (
                e.sample_id.clone(),
                affinity(cosine_with_norm(q, qq, e.fused.as_slice()), cfg.beta),
            )
        })
        .collect();

    let mut per_class: BTreeMap<String, f64> = BTreeMap::new();
    for (e, (_, a)) in gallery.entries().iter().zip(&per_entry) {
        let slot = per_class.entry(e.label.clone()).or_insert(match cfg.aggregation {
            Aggregation::ClassSum => 0.0,
            Aggregation::Nearest => f64::NEG_INFINITY,
        });
        match cfg.aggregation {
            Aggregation::ClassSum => *slot += a,
            Aggregation::Nearest => *slot = slot.max(*a),
        }
    }
    Ok(rank(per_entry, per_class))
}

fn rank(per_entry: Vec<(String, f64)>, per_class: BTreeMap<String, f64>) -> AffinityResult {
    let mut ranked: Vec<RankedClass> = per_class
        .iter()
        .map(|(label, &score)| RankedClass {
            label: label.clone(),
            score,
        })
        .collect();
    // BTreeMap order is ascending label; a stable sort keeps it for ties.
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let margin = match ranked.as_slice() {
        [top, second, ..] => top.score - second.score,
        [top] => top.score,
        [] => 0.0,
    };
    AffinityResult {
        per_entry,
        predicted_label: ranked[0].label.clone(),
        margin,
        per_class,
        ranked,
    }
}

/// Straightforward reference implementation of [`classify`]: scalar loops,
/// no shared helpers beyond the cosine definition.
pub fn brute_force_oracle(
    query: &[f32],
    gallery: &[(String, String, Vec<f32>)],
    beta: f64,
    nearest: bool,
) -> (String, f64) {
    let mut scores: Vec<(String, f64)> = Vec::new();
    for (_, label, v) in gallery {
        let mut dot = 0.0f64;
        let mut nq = 0.0f64;
        let mut nv = 0.0f64;
        for i in 0..query.len() {
            dot += query[i] as f64 * v[i] as f64;
            nq += query[i] as f64 * query[i] as f64;
            nv += v[i] as f64 * v[i] as f64;
        }
        let a = (-beta * (1.0 - (dot / (nq * nv).sqrt()).clamp(-1.0, 1.0))).exp();
        match scores.iter_mut().find(|(l, _)| l == label) {
            Some((_, s)) if nearest => *s = s.max(a),
            Some((_, s)) => *s += a,
            None => scores.push((label.clone(), a)),
        }
    }
    let mut best = scores[0].clone();
    for (l, s) in &scores[1..] {
        if *s > best.1 || (*s == best.1 && *l < best.0) {
            best = (l.clone(), *s);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affinity_endpoints() {
        assert_eq!(affinity(1.0, 5.5), 1.0);
        assert!((affinity(0.0, 5.5) - (-5.5f64).exp()).abs() < 1e-15);
        assert!((affinity(-1.0, 5.5) - (-11.0f64).exp()).abs() < 1e-15);
        assert_eq!(affinity(0.3, 0.0), 1.0);
    }
}
