//! Deterministic toy dual encoder.
//!
//! Image side: identity followed by L2 normalization (inputs already are
//! feature vectors). Text side: a fixed seeded random linear map applied to the
//! mean-pooled token sequence, then L2 normalization. Word embeddings are
//! seeded unit vectors keyed by the word itself, so a class always embeds the
//! same way no matter which other classes are present.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ImageEncoder, PhraseEmbedder, TextEncoder};
use crate::error::{validation, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gaussian, l2_norm, l2_normalize, vec_mat, Fingerprint};

/// Content length accepted by the toy text encoder.
pub const TOY_MAX_SEQUENCE: usize = 75;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyImageEncoder {
    dim: usize,
}

impl<T: Scalar> ImageEncoder<T> for ToyImageEncoder {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn encode_feature(&self, raw: ArrayView1<T>) -> Result<Array1<T>> {
        if raw.len() != self.dim {
            return Err(Error::Dimension {
                context: "toy image feature".into(),
                expected: self.dim,
                found: raw.len(),
            });
        }
        Ok(l2_normalize(raw))
    }

    fn checksum(&self) -> String {
        Fingerprint::new().tag("toy-image").bytes(&(self.dim as u64).to_le_bytes()).hex()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder<T> {
    /// `output_dim × token_dim`.
    projection: Array2<T>,
}

/// Saved forward state of one toy text encoding.
pub struct ToyTape<T> {
    len: usize,
    direction: Array1<T>,
    norm: T,
}

impl<T: Scalar> TextEncoder<T> for ToyTextEncoder<T> {
    type Tape = ToyTape<T>;

    fn token_dim(&self) -> usize {
        self.projection.ncols()
    }

    fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    fn max_sequence_length(&self) -> usize {
        TOY_MAX_SEQUENCE
    }

    fn forward(&self, tokens: ArrayView2<T>) -> Result<(Array1<T>, ToyTape<T>)> {
        let (len, dim) = tokens.dim();
        if dim != self.token_dim() {
            return Err(Error::Dimension {
                context: "toy text tokens".into(),
                expected: self.token_dim(),
                found: dim,
            });
        }
        if len == 0 || len > TOY_MAX_SEQUENCE {
            return Err(validation(format!(
                "token sequence length {len} outside 1..={TOY_MAX_SEQUENCE}"
            )));
        }
        let pooled = tokens.mean_axis(Axis(0)).expect("non-empty sequence");
        let z = self.projection.dot(&pooled);
        let norm = l2_norm(z.view());
        let direction = z.mapv(|x| x / norm);
        Ok((
            direction.clone(),
            ToyTape {
                len,
                direction,
                norm,
            },
        ))
    }

    fn backward(&self, tape: &ToyTape<T>, grad_output: ArrayView1<T>) -> Array2<T> {
        // d(z/|z|) = (I - t tᵀ) dz / |z|
        let along = tape.direction.dot(&grad_output);
        let grad_z = (&grad_output - &tape.direction.mapv(|t| t * along)).mapv(|g| g / tape.norm);
        let grad_pooled = vec_mat(grad_z.view(), self.projection.view());
        let per_token = grad_pooled.mapv(|g| g / T::from_usize(tape.len).unwrap());
        let mut out = Array2::zeros((tape.len, self.token_dim()));
        for mut row in out.rows_mut() {
            row.assign(&per_token);
        }
        out
    }

    fn checksum(&self) -> String {
        Fingerprint::new().tag("toy-text").array(&self.projection).hex()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEmbedder {
    dim: usize,
    seed: u64,
}

impl ToyEmbedder {
    fn word_vector<T: Scalar>(&self, word: &str) -> Array1<T> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(word.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let v: Array1<T> = gaussian(self.dim, 1.0, &mut rng);
        l2_normalize(v.view())
    }
}

impl<T: Scalar> PhraseEmbedder<T> for ToyEmbedder {
    fn token_dim(&self) -> usize {
        self.dim
    }

    fn embed_phrase(&self, text: &str) -> Result<Array2<T>> {
        let lowered = text.to_lowercase();
        let words: Vec<&str> = lowered.split_whitespace().collect();
        let mut out = Array2::zeros((words.len(), self.dim));
        for (mut row, w) in out.rows_mut().into_iter().zip(&words) {
            row.assign(&self.word_vector::<T>(w));
        }
        Ok(out)
    }

    fn checksum(&self) -> String {
        Fingerprint::new()
            .tag("toy-embedder")
            .bytes(&(self.dim as u64).to_le_bytes())
            .bytes(&self.seed.to_le_bytes())
            .hex()
    }
}

/// The three frozen handles of the toy backend.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackend<T> {
    pub image: ToyImageEncoder,
    pub text: ToyTextEncoder<T>,
    pub embedder: ToyEmbedder,
    pub seed: u64,
}

impl<T: Scalar> ToyBackend<T> {
    pub fn checksum(&self) -> String {
        let img = <ToyImageEncoder as ImageEncoder<T>>::checksum(&self.image);
        let emb = <ToyEmbedder as PhraseEmbedder<T>>::checksum(&self.embedder);
        Fingerprint::new()
            .tag(&img)
            .tag(&self.text.checksum())
            .tag(&emb)
            .hex()
    }
}

/// Builds the toy backend: `feature_dim` = d_v, `token_dim` = d_t.
pub fn toy_backend<T: Scalar>(feature_dim: usize, token_dim: usize, seed: u64) -> Result<ToyBackend<T>> {
    if feature_dim < 2 || token_dim < 2 {
        return Err(validation("toy backend dimensions must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = gaussian((feature_dim, token_dim), 1.0 / (token_dim as f64).sqrt(), &mut rng);
    Ok(ToyBackend {
        image: ToyImageEncoder { dim: feature_dim },
        text: ToyTextEncoder { projection },
        embedder: ToyEmbedder {
            dim: token_dim,
            seed,
        },
        seed,
    })
}
