//! Frozen image/text encoders and the frozen token bank.
//!
//! Encoders are consumed through traits so the trainer never depends on a
//! concrete backend. The toy backend is a deterministic desk-scale stand-in;
//! the CLIP adapter loads published dual-encoder weights.

pub mod clip;
pub mod toy;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::label::LabelSpace;
use crate::scalar::Scalar;
use crate::tensor::Fingerprint;

pub use toy::{toy_backend, ToyBackend, ToyEmbedder, ToyImageEncoder, ToyTextEncoder};

/// Phrase used for the unknown-class token sequence.
pub const UNKNOWN_PHRASE: &str = "unknown.";
/// Phrase used for template context initialization.
pub const CONTEXT_TEMPLATE: &str = "a photo of a";

/// Frozen image encoder producing L2-normalized features.
pub trait ImageEncoder<T: Scalar>: Send + Sync {
    fn feature_dim(&self) -> usize;

    /// Turns a cached (raw) encoder output into the normalized feature `v`.
    fn encode_feature(&self, raw: ArrayView1<T>) -> Result<Array1<T>>;

    /// Encodes an image file. Backends without a vision tower only accept cached features.
    fn encode_image(&self, path: &Path) -> Result<Array1<T>> {
        Err(Error::Backend(format!(
            "this backend cannot encode image files ({}); precompute a feature cache",
            path.display()
        )))
    }

    /// Digest of every frozen constant.
    fn checksum(&self) -> String;
}

/// Frozen text encoder, differentiable with respect to its input token embeddings.
pub trait TextEncoder<T: Scalar>: Send + Sync {
    /// Whatever the backward pass needs from the forward pass.
    type Tape: Send;

    fn token_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Longest content sequence (context plus class tokens) the encoder accepts.
    fn max_sequence_length(&self) -> usize;

    /// Encodes a content sequence (`len × token_dim`) to a unit vector.
    fn forward(&self, tokens: ArrayView2<T>) -> Result<(Array1<T>, Self::Tape)>;

    /// Vector-Jacobian product: gradient with respect to the input tokens.
    fn backward(&self, tape: &Self::Tape, grad_output: ArrayView1<T>) -> Array2<T>;

    fn encode(&self, tokens: ArrayView2<T>) -> Result<Array1<T>> {
        self.forward(tokens).map(|(out, _)| out)
    }

    fn checksum(&self) -> String;
}

/// Frozen word-embedding lookup used to build class and UNK token sequences.
pub trait PhraseEmbedder<T: Scalar>: Send + Sync {
    fn token_dim(&self) -> usize;
    /// Embeds a phrase as a `tokens × token_dim` matrix (no start/end markers).
    fn embed_phrase(&self, text: &str) -> Result<Array2<T>>;
    fn checksum(&self) -> String;
}

/// Converts a dataset class name into the phrase that gets tokenized.
pub fn class_phrase(name: &str) -> String {
    name.replace(['_', '-'], " ")
}

/// Frozen class-token sequences, in label-space order, plus the UNK sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBank<T> {
    class_names: Vec<String>,
    class_tokens: Vec<Array2<T>>,
    unk_tokens: Array2<T>,
    template_tokens: Array2<T>,
}

impl<T: Scalar> TokenBank<T> {
    pub fn build<E: PhraseEmbedder<T> + ?Sized>(embedder: &E, labels: &LabelSpace) -> Result<Self> {
        let class_tokens = labels
            .known_classes()
            .iter()
            .map(|c| embedder.embed_phrase(&class_phrase(c)))
            .collect::<Result<Vec<_>>>()?;
        for (name, t) in labels.known_classes().iter().zip(&class_tokens) {
            if t.nrows() == 0 {
                return Err(Error::Validation(format!("class `{name}` embeds to zero tokens")));
            }
        }
        Ok(TokenBank {
            class_names: labels.known_classes().to_vec(),
            class_tokens,
            unk_tokens: embedder.embed_phrase(UNKNOWN_PHRASE)?,
            template_tokens: embedder.embed_phrase(CONTEXT_TEMPLATE)?,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    pub fn class_tokens(&self, class: usize) -> ArrayView2<'_, T> {
        self.class_tokens[class].view()
    }

    pub fn unk_tokens(&self) -> ArrayView2<'_, T> {
        self.unk_tokens.view()
    }

    pub fn template_tokens(&self) -> ArrayView2<'_, T> {
        self.template_tokens.view()
    }

    pub fn token_dim(&self) -> usize {
        self.unk_tokens.ncols()
    }

    /// Longest class or UNK sequence.
    pub fn longest_sequence(&self) -> usize {
        self.class_tokens
            .iter()
            .map(|t| t.nrows())
            .chain(std::iter::once(self.unk_tokens.nrows()))
            .max()
            .unwrap_or(0)
    }

    /// Fails when a class or UNK sequence plus `context_length` context tokens exceeds `limit`.
    pub fn check_fits(&self, context_length: usize, limit: usize) -> Result<()> {
        let named = self
            .class_names
            .iter()
            .map(String::as_str)
            .zip(self.class_tokens.iter())
            .chain(std::iter::once((UNKNOWN_PHRASE, &self.unk_tokens)));
        for (name, tokens) in named {
            let total = context_length + tokens.nrows();
            if total > limit {
                return Err(Error::Validation(format!(
                    "class `{name}` needs {total} tokens with {context_length} context tokens, encoder accepts at most {limit}"
                )));
            }
        }
        Ok(())
    }

    pub fn checksum(&self) -> String {
        let mut fp = Fingerprint::new();
        for (name, t) in self.class_names.iter().zip(&self.class_tokens) {
            fp.tag(name).array(t);
        }
        fp.tag("unk").array(&self.unk_tokens);
        fp.tag("template").array(&self.template_tokens);
        fp.hex()
    }
}
