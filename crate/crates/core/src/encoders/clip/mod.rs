//! Adapter for published CLIP dual-encoder weights.
//!
//! # Expected layout
//!
//! A checkpoint reference is either a path or a registry name. A path may
//! point at a `.safetensors` file or at the directory holding it. The
//! directory must also contain the tokenizer files `vocab.json` and
//! `merges.txt`; `config.json` is read when present (head counts, layer-norm
//! epsilon, activation), otherwise heads default to `width / 64`.
//!
//! Registry names (`openai/clip-vit-base-patch16`, or the short aliases
//! `ViT-B/16` and `RN50`) resolve to the newest snapshot in the local Hugging
//! Face hub cache (`$HF_HUB_CACHE`, `$HF_HOME/hub`, `~/.cache/huggingface/hub`).
//! Nothing is downloaded.
//!
//! Both the Hugging Face `CLIPModel` tensor names and the OpenAI / OpenCLIP
//! names are accepted, in f32, f16 or bf16. Only the ViT image tower is
//! implemented; for ResNet checkpoints the feature width is read from
//! `visual.attnpool.c_proj.weight` and images must come from a feature cache.
//!
//! Text prompts are laid out as `[start, content.., end]`; the end-token row of
//! the final layer norm is projected and L2-normalized.

pub mod tokenizer;
pub mod transformer;
mod vision;
pub mod weights;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use self::tokenizer::BpeTokenizer;
use self::transformer::{normalize_backward, normalize_with_norm, BlockTape, NormCache};
use self::weights::{ConfigHints, Layout, TensorStore, TextTower, VisionKind, VisionTower};
use super::{ImageEncoder, PhraseEmbedder, TextEncoder, TokenBank};
use crate::error::{validation, Error, Result};
use crate::label::LabelSpace;
use crate::scalar::Scalar;
use crate::tensor::Fingerprint;

pub use self::vision::{preprocess, PIXEL_MEAN, PIXEL_STD};

const WEIGHT_FILES: [&str; 2] = ["model.safetensors", "open_clip_model.safetensors"];

/// Files making up one checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipFiles {
    pub weights: PathBuf,
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub config: Option<PathBuf>,
}

fn registry_alias(name: &str) -> &str {
    match name {
        "ViT-B/16" => "openai/clip-vit-base-patch16",
        "RN50" => "timm/resnet50_clip.openai",
        other => other,
    }
}

fn hub_roots() -> Vec<PathBuf> {
    let mut roots = Vec::new();
    if let Ok(p) = std::env::var("HF_HUB_CACHE") {
        roots.push(PathBuf::from(p));
    }
    if let Ok(p) = std::env::var("HF_HOME") {
        roots.push(PathBuf::from(p).join("hub"));
    }
    if let Ok(p) = std::env::var("HOME") {
        roots.push(PathBuf::from(p).join(".cache/huggingface/hub"));
    }
    roots
}

fn resolve_registry(name: &str) -> Result<PathBuf> {
    let repo = registry_alias(name);
    let folder = format!("models--{}", repo.replace('/', "--"));
    for root in hub_roots() {
        let snapshots = root.join(&folder).join("snapshots");
        let Ok(entries) = std::fs::read_dir(&snapshots) else { continue };
        let newest = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .max_by_key(|e| e.metadata().and_then(|m| m.modified()).ok());
        if let Some(entry) = newest {
            return Ok(entry.path());
        }
    }
    Err(Error::Backend(format!(
        "checkpoint `{name}` is not a path and `{repo}` is not in the local hub cache"
    )))
}

fn looks_like_registry_name(reference: &str) -> bool {
    !reference.is_empty()
        && !reference.starts_with(['.', '/', '~'])
        && reference.matches('/').count() <= 1
        && !reference.ends_with(".safetensors")
}

/// Finds the weight, tokenizer and config files for a path or registry name.
pub fn resolve_checkpoint(reference: &str) -> Result<ClipFiles> {
    let path = Path::new(reference);
    let (dir, weights) = if path.is_file() {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, path.to_path_buf())
    } else {
        let dir = if path.is_dir() {
            path.to_path_buf()
        } else if looks_like_registry_name(reference) {
            resolve_registry(reference)?
        } else {
            return Err(Error::Backend(format!("checkpoint `{reference}` does not exist")));
        };
        let weights = WEIGHT_FILES
            .iter()
            .map(|f| dir.join(f))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Backend(format!("no model.safetensors in {}", dir.display())))?;
        (dir, weights)
    };
    let required = |name: &str| {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Backend(format!("tokenizer file {} is missing", p.display())))
        }
    };
    let config = dir.join("config.json");
    Ok(ClipFiles {
        vocab: required("vocab.json")?,
        merges: required("merges.txt")?,
        config: config.is_file().then_some(config),
        weights,
    })
}

/// Summary of a loaded checkpoint, recorded in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipInfo {
    pub files: ClipFiles,
    pub layout: Layout,
    pub vision: VisionKind,
    pub text_width: usize,
    pub text_layers: usize,
    pub context_length: usize,
    pub feature_dim: usize,
}

pub struct ClipTextEncoder<T> {
    tower: Arc<TextTower<T>>,
    start: Array1<T>,
    end: Array1<T>,
    checksum: String,
}

/// Saved forward state of one text encoding.
pub struct ClipTape<T> {
    len: usize,
    blocks: Vec<BlockTape<T>>,
    final_norm: NormCache<T>,
    unit: Array1<T>,
    norm: T,
}

impl<T: Scalar> ClipTextEncoder<T> {
    fn width(&self) -> usize {
        self.tower.token_embedding.ncols()
    }

    fn run(&self, tokens: ArrayView2<T>, keep: bool) -> Result<(Array1<T>, Vec<BlockTape<T>>, NormCache<T>)> {
        let (len, dim) = tokens.dim();
        if dim != self.width() {
            return Err(Error::Dimension {
                context: "clip text tokens".into(),
                expected: self.width(),
                found: dim,
            });
        }
        let limit = self.max_sequence_length();
        if len == 0 || len > limit {
            return Err(validation(format!("token sequence length {len} outside 1..={limit}")));
        }
        let mut x = Array2::zeros((len + 2, dim));
        x.row_mut(0).assign(&self.start);
        x.slice_mut(s![1..=len, ..]).assign(&tokens);
        x.row_mut(len + 1).assign(&self.end);
        x += &self.tower.positional.slice(s![..len + 2, ..]);
        let mut tapes = Vec::with_capacity(if keep { self.tower.blocks.len() } else { 0 });
        for block in &self.tower.blocks {
            let (y, tape) = block.forward(x.view(), true);
            if keep {
                tapes.push(tape);
            }
            x = y;
        }
        let (pooled, cache) = self.tower.final_ln.forward(x.slice(s![len + 1..len + 2, ..]));
        Ok((pooled.row(0).dot(&self.tower.projection), tapes, cache))
    }

    /// Unnormalized text embedding of a content sequence.
    pub fn raw_features(&self, tokens: ArrayView2<T>) -> Result<Array1<T>> {
        self.run(tokens, false).map(|(raw, _, _)| raw)
    }
}

impl<T: Scalar> TextEncoder<T> for ClipTextEncoder<T> {
    type Tape = ClipTape<T>;

    fn token_dim(&self) -> usize {
        self.width()
    }

    fn output_dim(&self) -> usize {
        self.tower.projection.ncols()
    }

    fn max_sequence_length(&self) -> usize {
        self.tower.positional.nrows().saturating_sub(2)
    }

    fn forward(&self, tokens: ArrayView2<T>) -> Result<(Array1<T>, ClipTape<T>)> {
        let (raw, blocks, final_norm) = self.run(tokens, true)?;
        let (unit, norm) = normalize_with_norm(raw.view());
        let tape = ClipTape {
            len: tokens.nrows(),
            blocks,
            final_norm,
            unit: unit.clone(),
            norm,
        };
        Ok((unit, tape))
    }

    fn backward(&self, tape: &ClipTape<T>, grad_output: ArrayView1<T>) -> Array2<T> {
        let g_raw = normalize_backward(tape.unit.view(), tape.norm, grad_output);
        let g_pooled = self.tower.projection.dot(&g_raw).insert_axis(Axis(0));
        let g_end = self.tower.final_ln.backward(&tape.final_norm, g_pooled.view());
        let mut g = Array2::zeros((tape.len + 2, self.width()));
        g.row_mut(tape.len + 1).assign(&g_end.row(0));
        for (block, bt) in self.tower.blocks.iter().zip(&tape.blocks).rev() {
            g = block.backward(bt, g.view());
        }
        g.slice(s![1..=tape.len, ..]).to_owned()
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }
}

pub struct ClipImageEncoder<T> {
    tower: Option<VisionTower<T>>,
    feature_dim: usize,
    checksum: String,
}

impl<T: Scalar> ClipImageEncoder<T> {
    /// Unnormalized image embedding of preprocessed `3 × S × S` pixels.
    pub fn raw_features(&self, pixels: ArrayView3<T>) -> Result<Array1<T>> {
        self.vit()?.forward(pixels)
    }

    /// Input resolution of the vision tower.
    pub fn image_size(&self) -> Result<usize> {
        Ok(self.vit()?.image_size)
    }

    fn vit(&self) -> Result<&VisionTower<T>> {
        self.tower
            .as_ref()
            .ok_or_else(|| Error::Backend("this checkpoint's image tower is not implemented; use a feature cache".into()))
    }
}

impl<T: Scalar> ImageEncoder<T> for ClipImageEncoder<T> {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn encode_feature(&self, raw: ArrayView1<T>) -> Result<Array1<T>> {
        if raw.len() != self.feature_dim {
            return Err(Error::Dimension {
                context: "clip image feature".into(),
                expected: self.feature_dim,
                found: raw.len(),
            });
        }
        Ok(normalize_with_norm(raw).0)
    }

    fn encode_image(&self, path: &Path) -> Result<Array1<T>> {
        let tower = self.vit()?;
        let pixels = preprocess(path, tower.image_size)?;
        let raw = tower.forward(pixels.view())?;
        Ok(normalize_with_norm(raw.view()).0)
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }
}

pub struct ClipEmbedder<T> {
    tokenizer: BpeTokenizer,
    table: Arc<Array2<T>>,
    checksum: String,
}

impl<T: Scalar> ClipEmbedder<T> {
    pub fn token_ids(&self, text: &str) -> Result<Vec<u32>> {
        self.tokenizer.encode(text)
    }

    pub fn tokenizer(&self) -> &BpeTokenizer {
        &self.tokenizer
    }
}

impl<T: Scalar> PhraseEmbedder<T> for ClipEmbedder<T> {
    fn token_dim(&self) -> usize {
        self.table.ncols()
    }

    fn embed_phrase(&self, text: &str) -> Result<Array2<T>> {
        let ids = self.tokenizer.encode(text)?;
        let mut out = Array2::zeros((ids.len(), self.table.ncols()));
        for (mut row, &id) in out.rows_mut().into_iter().zip(&ids) {
            let id = id as usize;
            if id >= self.table.nrows() {
                return Err(Error::Format(format!("token id {id} exceeds the embedding table")));
            }
            row.assign(&self.table.row(id));
        }
        Ok(out)
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }
}

/// The three frozen handles of a loaded checkpoint.
pub struct ClipBackend<T> {
    pub image: ClipImageEncoder<T>,
    pub text: ClipTextEncoder<T>,
    pub embedder: ClipEmbedder<T>,
    pub info: ClipInfo,
}

impl<T: Scalar> ClipBackend<T> {
    pub fn token_bank(&self, labels: &LabelSpace) -> Result<TokenBank<T>> {
        TokenBank::build(&self.embedder, labels)
    }

    pub fn checksum(&self) -> String {
        Fingerprint::new()
            .tag(&self.image.checksum)
            .tag(&self.text.checksum)
            .tag(&self.embedder.checksum)
            .hex()
    }
}

/// Loads a checkpoint from a path or registry name.
pub fn load_clip<T: Scalar>(reference: &str) -> Result<ClipBackend<T>> {
    let files = resolve_checkpoint(reference)?;
    let hints = match &files.config {
        Some(p) => ConfigHints::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => ConfigHints::default(),
    };
    let store = TensorStore::read(&files.weights)?;
    let tokenizer = BpeTokenizer::from_files(&files.vocab, &files.merges)?;
    from_parts(store, tokenizer, &hints, files)
}

fn from_parts<T: Scalar>(store: TensorStore, tokenizer: BpeTokenizer, hints: &ConfigHints, files: ClipFiles) -> Result<ClipBackend<T>> {
    let layout = weights::detect_layout(&store)?;
    let text = weights::text_tower::<T>(&store, layout, &hints.text)?;
    let vision = weights::detect_vision(&store, layout)?;
    let tower = match vision {
        VisionKind::Vit { .. } => Some(weights::vision_tower::<T>(&store, layout, &hints.vision)?),
        VisionKind::ResNet { .. } => None,
    };
    let feature_dim = match (&tower, &vision) {
        (Some(t), _) => t.projection.ncols(),
        (None, VisionKind::ResNet { output_dim }) => *output_dim,
        (None, VisionKind::Vit { .. }) => unreachable!("ViT towers are always built"),
    };
    let vocab = text.token_embedding.nrows();
    for id in [tokenizer.start_id(), tokenizer.end_id()] {
        if id as usize >= vocab {
            return Err(Error::Format(format!("tokenizer id {id} exceeds the embedding table ({vocab} rows)")));
        }
    }
    if text.positional.nrows() < 3 {
        return Err(Error::Format("text context is shorter than three positions".into()));
    }
    let text_digest = store.digest(|k| !k.starts_with("vision_model.") && !k.starts_with("visual"));
    let image_digest = store.digest(|k| k.starts_with("vision_model.") || k.starts_with("visual"));
    let table = Arc::clone(&text.token_embedding);
    let info = ClipInfo {
        files,
        layout,
        vision,
        text_width: table.ncols(),
        text_layers: text.blocks.len(),
        context_length: text.positional.nrows(),
        feature_dim,
    };
    let start = table.row(tokenizer.start_id() as usize).to_owned();
    let end = table.row(tokenizer.end_id() as usize).to_owned();
    let embed_digest = Fingerprint::new().tag("clip-embedder").tag(&text_digest).hex();
    Ok(ClipBackend {
        image: ClipImageEncoder {
            tower,
            feature_dim,
            checksum: Fingerprint::new().tag("clip-image").tag(&image_digest).hex(),
        },
        text: ClipTextEncoder {
            tower: Arc::new(text),
            start,
            end,
            checksum: Fingerprint::new().tag("clip-text").tag(&text_digest).hex(),
        },
        embedder: ClipEmbedder {
            tokenizer,
            table,
            checksum: embed_digest,
        },
        info,
    })
}
