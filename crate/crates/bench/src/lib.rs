//! Random fixtures shared by the benchmarks.

use std::collections::HashMap;

use fgvr_core::encoders::{normalize, EmbeddingVector};
use fgvr_core::Gallery;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn unit(rng: &mut impl Rng, dim: usize) -> EmbeddingVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(u) = normalize(&v) {
            return u;
        }
    }
}

/// `classes * shots` random unit rows of width `dim`, labelled `class-NNNN`.
pub fn rows(classes: usize, shots: usize, dim: usize, seed: u64) -> Vec<(String, String, EmbeddingVector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes * shots);
    for c in 0..classes {
        for k in 0..shots {
            out.push((format!("s{c:04}-{k:02}"), format!("class-{c:04}"), unit(&mut rng, dim)));
        }
    }
    out
}

pub fn gallery(classes: usize, shots: usize, dim: usize, seed: u64) -> Gallery {
    Gallery::from_vectors(rows(classes, shots, dim, seed)).expect("valid random gallery")
}

pub fn query(dim: usize, seed: u64) -> EmbeddingVector {
    unit(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9), dim)
}

/// Image embeddings and labels keyed by sample id, as the selector takes them.
pub fn index(
    classes: usize,
    shots: usize,
    dim: usize,
    seed: u64,
) -> (HashMap<String, EmbeddingVector>, HashMap<String, String>) {
    let mut emb = HashMap::new();
    let mut labels = HashMap::new();
    for (id, label, v) in rows(classes, shots, dim, seed) {
        labels.insert(id.clone(), label);
        emb.insert(id, v);
    }
    (emb, labels)
}
