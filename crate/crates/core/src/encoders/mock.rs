use std::collections::{BTreeSet, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{EncodeError, EncodeItem, Encoder, EncoderDescriptor, EncoderKind, Modality};

/// Deterministic stand-in for a neural encoder.
///
/// Images map to a Gaussian vector drawn from a ChaCha stream seeded by
/// `(model_id, content hash)`. Texts map to the sum of per-token Gaussian
/// vectors over the set of lowercase alphanumeric tokens, so texts that share
/// more tokens land closer together.
pub struct MockEncoder {
    desc: EncoderDescriptor,
    fail_keys: HashSet<String>,
}

impl MockEncoder {
    pub fn new(desc: EncoderDescriptor) -> Result<Self, EncodeError> {
        if desc.backend_kind != EncoderKind::SyntheticMock {
            return Err(EncodeError::InvalidDescriptor(format!(
                "mock encoder given a {:?} descriptor",
                desc.backend_kind
            )));
        }
        if desc.dim == 0 {
            return Err(EncodeError::InvalidDescriptor("dim must be positive".into()));
        }
        Ok(Self {
            desc,
            fail_keys: HashSet::new(),
        })
    }

    /// Makes requests for these content keys (or exact texts) fail with
    /// `BackendUnavailable`.
    pub fn failing_on<I, S>(mut self, keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.fail_keys.extend(keys.into_iter().map(Into::into));
        self
    }

    fn gaussian(&self, domain: &[u8], payload: &[u8]) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.desc.model_id.as_bytes());
        h.update([0u8]);
        h.update(domain);
        h.update([0u8]);
        h.update(payload);
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.desc.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

pub(crate) fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl Encoder for MockEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.desc
    }

    fn encode_raw(&self, item: &EncodeItem) -> Result<Vec<f64>, EncodeError> {
        match item {
            EncodeItem::Image(content) => {
                debug_assert_eq!(self.desc.modality, Modality::Image);
                if self.fail_keys.contains(&content.key) {
                    return Err(EncodeError::BackendUnavailable(format!(
                        "mock configured to fail on {}",
                        content.key
                    )));
                }
                let hash = content
                    .content_hash()
                    .map_err(|e| EncodeError::ContentUnresolvable(format!("{}: {e}", content.id)))?;
                Ok(self.gaussian(b"image", &hash))
            }
            EncodeItem::Text(text) => {
                if self.fail_keys.contains(text) {
                    return Err(EncodeError::BackendUnavailable(format!(
                        "mock configured to fail on text {text:?}"
                    )));
                }
                let tokens: BTreeSet<String> = tokenize(text).collect();
                if tokens.is_empty() {
                    return Err(EncodeError::EmptyText);
                }
                let mut acc = vec![0.0; self.desc.dim];
                for tok in &tokens {
                    for (a, v) in acc.iter_mut().zip(self.gaussian(b"token", tok.as_bytes())) {
                        *a += v;
                    }
                }
                Ok(acc)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::ContentRef;
    use crate::encoders::{batch_embed, cosine, embed_image, embed_text};

    fn image_mock() -> MockEncoder {
        MockEncoder::new(EncoderDescriptor::mock(Modality::Image, "mock-img", 32)).unwrap()
    }

    #[test]
    fn image_embedding_is_deterministic() {
        let enc = image_mock();
        let a1 = embed_image(&enc, &ContentRef::from_key("A")).unwrap();
        let a2 = embed_image(&enc, &ContentRef::from_key("A")).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.dim(), 32);
        assert!((a1.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn model_id_changes_vectors() {
        let a = image_mock();
        let b = MockEncoder::new(EncoderDescriptor::mock(Modality::Image, "other", 32)).unwrap();
        let c = ContentRef::from_key("A");
        assert_ne!(embed_image(&a, &c).unwrap(), embed_image(&b, &c).unwrap());
    }

    #[test]
    fn no_collisions_on_hundred_ids() {
        // Exhaustive pairwise scan.
        let enc = image_mock();
        let vecs: Vec<_> = (0..100)
            .map(|i| embed_image(&enc, &ContentRef::from_key(format!("id-{i}"))).unwrap())
            .collect();
        let mut worst = f64::MIN;
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                let c = cosine(vecs[i].as_slice(), vecs[j].as_slice());
                assert!(c < 1.0, "ids {i} and {j} collide");
                worst = worst.max(c);
            }
        }
        assert!(worst < 0.9, "max pairwise cosine {worst}");
    }

    #[test]
    fn text_identical_strings_identical_vectors() {
        let enc = MockEncoder::new(EncoderDescriptor::mock(Modality::Text, "mock-txt", 64)).unwrap();
        assert_eq!(
            embed_text(&enc, "white fur, upright ears").unwrap(),
            embed_text(&enc, "white fur, upright ears").unwrap()
        );
    }

    #[test]
    fn shared_tokens_raise_cosine() {
        let enc = MockEncoder::new(EncoderDescriptor::mock(Modality::Text, "mock-txt", 256)).unwrap();
        let anchor = "white fur upright ears angular face long tail";
        // Candidates share 4, 3, 2, 1 tokens with the anchor respectively.
        let texts = [
            "white fur upright ears angular sleek",
            "white fur upright spotted sleek coat",
            "white fur curled spotted sleek coat",
            "white striped curled spotted sleek coat",
        ];
        let a = embed_text(&enc, anchor).unwrap();
        let cos: Vec<f64> = texts
            .iter()
            .map(|t| cosine(a.as_slice(), embed_text(&enc, t).unwrap().as_slice()))
            .collect();
        // Overlap-only ideal: |A∩B| / sqrt(|A||B|) with |A| = 7, |B| = 6.
        for w in cos.windows(2) {
            assert!(w[0] > w[1], "cosines not decreasing with overlap: {cos:?}");
        }
    }

    #[test]
    fn batch_matches_single_calls() {
        let enc = image_mock();
        let items: Vec<EncodeItem> = (0..10)
            .map(|i| EncodeItem::Image(ContentRef::from_key(format!("s{i}"))))
            .collect();
        let batch = batch_embed(&enc, &items, 4).unwrap();
        assert_eq!(batch.len(), 10);
        for (item, got) in items.iter().zip(&batch) {
            let EncodeItem::Image(c) = item else { unreachable!() };
            assert_eq!(&embed_image(&enc, c).unwrap(), got);
        }
        assert!(batch_embed(&enc, &[], 4).unwrap().is_empty());
    }

    #[test]
    fn batch_reports_failing_index() {
        let enc = image_mock().failing_on(["bad"]);
        let items: Vec<EncodeItem> = ["a", "b", "c", "bad", "e"]
            .iter()
            .map(|k| EncodeItem::Image(ContentRef::from_key(*k)))
            .collect();
        match batch_embed(&enc, &items, 2) {
            Err(EncodeError::Batch { index, source }) => {
                assert_eq!(index, 3);
                assert!(matches!(*source, EncodeError::BackendUnavailable(_)));
            }
            other => panic!("expected batch error, got {other:?}"),
        }
    }
}
