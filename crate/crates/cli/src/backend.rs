//! Backend selection: the seeded toy encoder pair or a CLIP checkpoint.

use std::path::Path;

use clap::ValueEnum;
use cosmo::data::FeatureSource;
use cosmo::encoders::clip::{load_clip, ClipBackend};
use cosmo::encoders::{toy_backend, ToyBackend};
use cosmo::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Toy backend parameters written next to synthetic datasets.
pub const TOY_BACKEND_FILE: &str = "toy_backend.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Clip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub feature_dim: usize,
    pub token_dim: usize,
    pub seed: u64,
}

impl ToySpec {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(TOY_BACKEND_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }

    /// Reads `toy_backend.json` from the dataset root, or derives the width from the feature cache.
    fn resolve(root: &Path, source: &FeatureSource) -> Result<Self> {
        let path = root.join(TOY_BACKEND_FILE);
        if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            return Ok(serde_json::from_str(&text)?);
        }
        match source {
            FeatureSource::Cache(cache) => {
                let dim = cache
                    .iter()
                    .next()
                    .map(|(_, v)| v.len())
                    .ok_or_else(|| Error::Validation("the feature cache is empty".into()))?;
                Ok(ToySpec {
                    feature_dim: dim,
                    token_dim: dim,
                    seed: 0,
                })
            }
            FeatureSource::Images(_) => Err(Error::Validation(
                "the toy backend reads feature caches only; run `cosmo cache` with a CLIP backend first".into(),
            )),
        }
    }
}

pub enum Backend {
    Toy(ToyBackend<f32>, ToySpec),
    Clip(Box<ClipBackend<f32>>),
}

impl Backend {
    pub fn open(kind: BackendKind, weights: Option<&str>, root: &Path, source: &FeatureSource) -> Result<Self> {
        match kind {
            BackendKind::Toy => {
                let spec = ToySpec::resolve(root, source)?;
                Ok(Backend::Toy(toy_backend(spec.feature_dim, spec.token_dim, spec.seed)?, spec))
            }
            BackendKind::Clip => Self::clip(weights),
        }
    }

    pub fn clip(weights: Option<&str>) -> Result<Self> {
        let reference =
            weights.ok_or_else(|| Error::Validation("the clip backend needs --weights <path or registry name>".into()))?;
        Ok(Backend::Clip(Box::new(load_clip(reference)?)))
    }

    /// Stored in checkpoints and run manifests.
    pub fn describe(&self) -> Value {
        match self {
            Backend::Toy(be, spec) => json!({
                "kind": "toy",
                "feature_dim": spec.feature_dim,
                "token_dim": spec.token_dim,
                "seed": spec.seed,
                "checksum": be.checksum(),
            }),
            Backend::Clip(be) => json!({
                "kind": "clip",
                "info": be.info,
                "checksum": be.checksum(),
            }),
        }
    }
}

/// Runs `$body` with `$image`, `$text` and `$embedder` bound to the concrete handles.
#[macro_export]
macro_rules! with_backend {
    ($backend:expr, |$image:ident, $text:ident, $embedder:ident| $body:expr) => {
        match $backend {
            $crate::backend::Backend::Toy(be, _) => {
                let ($image, $text, $embedder) = (&be.image, &be.text, &be.embedder);
                $body
            }
            $crate::backend::Backend::Clip(be) => {
                let ($image, $text, $embedder) = (&be.image, &be.text, &be.embedder);
                $body
            }
        }
    };
}
