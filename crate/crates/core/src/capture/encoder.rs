/// Dense phrase embedder used by the soft-matching stage.
pub trait PhraseEncoder: Send + Sync {
    /// Unit-norm embedding of a canonical phrase.
    fn embed(&self, phrase: &str) -> Vec<f64>;

    /// Cosine similarity of two phrases.
    fn similarity(&self, a: &str, b: &str) -> f64 {
        let (ea, eb) = (self.embed(a), self.embed(b));
        ea.iter().zip(&eb).map(|(x, y)| x * y).sum()
    }
}

/// Encoder that never grants soft credit: every cross-similarity is zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullEncoder;

impl PhraseEncoder for NullEncoder {
    fn embed(&self, _phrase: &str) -> Vec<f64> {
        vec![1.0]
    }

    fn similarity(&self, _a: &str, _b: &str) -> f64 {
        0.0
    }
}

/// Feature-hashing embedder over character trigrams of `#phrase#`.
#[derive(Debug, Clone, Copy)]
pub struct HashingEncoder {
    dim: usize,
    seed: u64,
}

pub const DEFAULT_ENCODER_DIM: usize = 64;
const DEFAULT_ENCODER_SEED: u64 = 0x5eed_cafe_f00d_0001;
const NGRAM: usize = 3;

impl Default for HashingEncoder {
    fn default() -> Self {
        Self::new(DEFAULT_ENCODER_DIM)
    }
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self {
            dim,
            seed: DEFAULT_ENCODER_SEED,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn hash(&self, gram: &[char]) -> u64 {
        // FNV-1a, seeded
        let mut h = 0xcbf2_9ce4_8422_2325u64 ^ self.seed;
        for c in gram {
            for b in (*c as u32).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

impl PhraseEncoder for HashingEncoder {
    fn embed(&self, phrase: &str) -> Vec<f64> {
        let padded: Vec<char> = std::iter::once('#')
            .chain(phrase.chars())
            .chain(std::iter::once('#'))
            .collect();
        let mut v = vec![0.0; self.dim];
        for gram in padded.windows(NGRAM.min(padded.len())) {
            let h = self.hash(gram);
            let slot = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[slot] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // all grams cancelled
            v[(self.hash(&padded) % self.dim as u64) as usize] = 1.0;
            return v;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn similar_strings_score_higher() {
        let enc = HashingEncoder::default();
        let near = enc.similarity("red car", "red cars");
        let far = enc.similarity("red car", "tall building");
        assert!(near > far, "near {near} far {far}");
        assert!((enc.similarity("tree", "tree") - 1.0).abs() < 1e-12);
    }

    #[test]
    fn null_encoder_gives_no_credit() {
        assert_eq!(NullEncoder.similarity("car", "car"), 0.0);
    }

    proptest! {
        #[test]
        fn hashing_embeddings_are_unit_norm(s in "[a-z ]{1,20}") {
            let enc = HashingEncoder::default();
            let e = enc.embed(&s);
            prop_assert_eq!(e.len(), DEFAULT_ENCODER_DIM);
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
            prop_assert_eq!(e, enc.embed(&s));
        }
    }
}
