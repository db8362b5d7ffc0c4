use std::collections::HashMap;

use crate::encoders::{EncodeError, EncodeItem, Encoder, EncoderDescriptor, Modality};

/// Text encoder over a fixed vocabulary: the indicator vector of the
/// vocabulary tokens a text contains. One extra coordinate fires for texts
/// with no vocabulary token at all, so every text has a direction.
pub struct VocabTextEncoder {
    desc: EncoderDescriptor,
    index: HashMap<String, usize>,
}

impl VocabTextEncoder {
    pub fn new(vocab: Vec<String>) -> Self {
        let dim = vocab.len() + 1;
        let index = vocab
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t.to_lowercase(), i))
            .collect();
        Self {
            desc: EncoderDescriptor::mock(Modality::Text, "synth-vocab", dim),
            index,
        }
    }

    /// Vocabulary indices present in `text`, ascending and deduplicated.
    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = crate::encoders::tokenize(text)
            .filter_map(|t| self.index.get(&t).copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

impl Encoder for VocabTextEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.desc
    }

    fn encode_raw(&self, item: &EncodeItem) -> Result<Vec<f64>, EncodeError> {
        let EncodeItem::Text(text) = item else {
            return Err(EncodeError::WrongModality {
                expected: Modality::Text,
                actual: Modality::Image,
            });
        };
        let mut v = vec![0.0; self.desc.dim];
        let ids = self.token_ids(text);
        if ids.is_empty() {
            v[self.desc.dim - 1] = 1.0;
        }
        for i in ids {
            v[i] = 1.0;
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::embed_text;

    #[test]
    fn indicator_over_vocabulary() {
        let enc = VocabTextEncoder::new(vec!["attr000".into(), "attr001".into(), "attr002".into()]);
        let v = embed_text(&enc, "crown: attr002; tail: attr000 attr000").unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert_eq!(v.as_slice(), &[h, 0.0, h, 0.0]);
        let unk = embed_text(&enc, "nothing distinctive").unwrap();
        assert_eq!(unk.as_slice(), &[0.0, 0.0, 0.0, 1.0]);
    }
}
