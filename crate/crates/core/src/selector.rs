//! Reference exemplar selection.
//!
//! Classes are the clusters: each class center is the normalized mean of its
//! K-shot image embeddings. For a target image the classes are ranked by
//! cosine to their centers and one member is drawn from each of the top `t`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{cosine, normalize, EmbeddingVector, EncodeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCenter {
    pub class_label: String,
    pub center: EmbeddingVector,
    /// Sorted ascending.
    pub member_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub sample_id: String,
    pub class_label: String,
    pub center_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub target_id: String,
    pub references: Vec<Reference>,
    pub t: usize,
}

impl ReferenceSet {
    pub fn empty(target_id: impl Into<String>) -> Self {
        Self {
            target_id: target_id.into(),
            references: Vec::new(),
            t: 0,
        }
    }

    pub fn sample_ids(&self) -> Vec<String> {
        self.references.iter().map(|r| r.sample_id.clone()).collect()
    }
}

/// Which member represents a selected class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepresentativeRule {
    /// Member with the highest cosine to the target image.
    #[default]
    NearestToTarget,
    /// Member with the highest cosine to its own class center.
    NearestToCenter,
}

#[derive(Debug, thiserror::Error)]
pub enum SelectorError {
    #[error("sample {0} has no label")]
    MissingLabel(String),
    #[error("class {0} mean is the zero vector")]
    ZeroVector(String),
    #[error("no class centers")]
    NoCenters,
    #[error("every class was excluded")]
    NoEligibleClasses,
    #[error("reference count t must be at least 1")]
    InvalidT,
    #[error("member {0} has no embedding")]
    MissingEmbedding(String),
    #[error("class {label}: {source}")]
    Vector {
        label: String,
        #[source]
        source: EncodeError,
    },
}

/// One center per class, in ascending label order.
pub fn compute_class_centers(
    embeddings: &HashMap<String, EmbeddingVector>,
    labels: &HashMap<String, String>,
) -> Result<Vec<ClassCenter>, SelectorError> {
    let mut members: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for id in embeddings.keys() {
        let label = labels.get(id).ok_or_else(|| SelectorError::MissingLabel(id.clone()))?;
        members.entry(label).or_default().push(id);
    }
    members
        .into_iter()
        .map(|(label, mut ids)| {
            ids.sort_unstable();
            let dim = embeddings[ids[0]].dim();
            let mut sum = vec![0.0f64; dim];
            for id in &ids {
                for (s, v) in sum.iter_mut().zip(embeddings[*id].as_slice()) {
                    *s += f64::from(*v);
                }
            }
            let n = ids.len() as f64;
            sum.iter_mut().for_each(|s| *s /= n);
            let center = normalize(&sum).map_err(|e| match e {
                EncodeError::ZeroVector => SelectorError::ZeroVector(label.to_string()),
                other => SelectorError::Vector {
                    label: label.to_string(),
                    source: other,
                },
            })?;
            Ok(ClassCenter {
                class_label: label.to_string(),
                center,
                member_ids: ids.into_iter().map(String::from).collect(),
            })
        })
        .collect()
}

fn eligible<'a>(centers: &'a [ClassCenter], exclude_label: Option<&str>) -> Vec<&'a ClassCenter> {
    centers
        .iter()
        .filter(|c| Some(c.class_label.as_str()) != exclude_label)
        .collect()
}

/// Selects up to `t` exemplars from distinct classes, nearest centers first.
///
/// Ranking ties are broken by ascending label, member ties by ascending id, so
/// the result does not depend on the order of `centers`.
pub fn select_references(
    target_id: &str,
    target: &EmbeddingVector,
    centers: &[ClassCenter],
    per_sample: &HashMap<String, EmbeddingVector>,
    t: usize,
    exclude_label: Option<&str>,
    rule: RepresentativeRule,
) -> Result<ReferenceSet, SelectorError> {
    if t == 0 {
        return Err(SelectorError::InvalidT);
    }
    if centers.is_empty() {
        return Err(SelectorError::NoCenters);
    }
    let mut ranked: Vec<(&ClassCenter, f64)> = eligible(centers, exclude_label)
        .into_iter()
        .map(|c| (c, cosine(target.as_slice(), c.center.as_slice())))
        .collect();
    if ranked.is_empty() {
        return Err(SelectorError::NoEligibleClasses);
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.class_label.cmp(&b.0.class_label)));
    ranked.truncate(t);

    let references = ranked
        .into_iter()
        .map(|(c, sim)| {
            let anchor = match rule {
                RepresentativeRule::NearestToTarget => target,
                RepresentativeRule::NearestToCenter => &c.center,
            };
            let mut best: Option<(&str, f64)> = None;
            for id in &c.member_ids {
                let v = per_sample
                    .get(id)
                    .ok_or_else(|| SelectorError::MissingEmbedding(id.clone()))?;
                let s = cosine(anchor.as_slice(), v.as_slice());
                // member_ids ascend, so strict > keeps the smallest id on ties.
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((id, s));
                }
            }
            let (id, _) = best.expect("member_ids is non-empty");
            Ok(Reference {
                sample_id: id.to_string(),
                class_label: c.class_label.clone(),
                center_similarity: sim,
            })
        })
        .collect::<Result<Vec<_>, SelectorError>>()?;

    Ok(ReferenceSet {
        target_id: target_id.to_string(),
        references,
        t,
    })
}

/// Picks `t` classes and one member of each uniformly at random, ignoring
/// visual similarity. References are still reported in descending center
/// similarity so downstream prompts see a canonical order.
pub fn select_random_references<R: Rng + ?Sized>(
    target_id: &str,
    target: &EmbeddingVector,
    centers: &[ClassCenter],
    t: usize,
    exclude_label: Option<&str>,
    rng: &mut R,
) -> Result<ReferenceSet, SelectorError> {
    if t == 0 {
        return Err(SelectorError::InvalidT);
    }
    if centers.is_empty() {
        return Err(SelectorError::NoCenters);
    }
    let mut pool = eligible(centers, exclude_label);
    if pool.is_empty() {
        return Err(SelectorError::NoEligibleClasses);
    }
    pool.sort_by(|a, b| a.class_label.cmp(&b.class_label));
    let chosen: Vec<&ClassCenter> = pool.choose_multiple(rng, t).copied().collect();
    let mut references: Vec<Reference> = chosen
        .into_iter()
        .map(|c| Reference {
            sample_id: c.member_ids.choose(rng).expect("non-empty class").clone(),
            class_label: c.class_label.clone(),
            center_similarity: cosine(target.as_slice(), c.center.as_slice()),
        })
        .collect();
    references.sort_by(|a, b| {
        b.center_similarity
            .total_cmp(&a.center_similarity)
            .then_with(|| a.class_label.cmp(&b.class_label))
    });
    Ok(ReferenceSet {
        target_id: target_id.to_string(),
        references,
        t,
    })
}

/// Distinct labels appearing in a reference set.
pub fn reference_labels(set: &ReferenceSet) -> BTreeSet<&str> {
    set.references.iter().map(|r| r.class_label.as_str()).collect()
}
