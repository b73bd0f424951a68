//! Safetensors loading and mapping of both published naming schemes onto one
//! set of tower structs.
//!
//! * Hugging Face `CLIPModel`: `text_model.*`, `vision_model.*`,
//!   `text_projection.weight`, `visual_projection.weight`.
//! * OpenAI / OpenCLIP: `token_embedding.weight`, `transformer.resblocks.*`,
//!   `ln_final.*`, `text_projection`, `visual.*`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use half::{bf16, f16};
use ndarray::{s, Array1, Array2};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::transformer::{Block, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    HuggingFace,
    OpenAi,
}

/// Image tower found in the checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VisionKind {
    Vit { image_size: usize, patch_size: usize, width: usize, layers: usize },
    /// Only the output width is read; images must be encoded ahead of time.
    ResNet { output_dim: usize },
}

/// Raw tensors keyed by name, widened to `f32`.
pub struct TensorStore {
    tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

impl TensorStore {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Format(format!("not a safetensors file: {e}")))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            let data = view.data();
            let values: Vec<f32> = match view.dtype() {
                Dtype::F32 => data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
                Dtype::F16 => data.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
                Dtype::BF16 => data.chunks_exact(2).map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
                Dtype::F64 => data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
                    .collect(),
                // Integer buffers (e.g. position ids) are not weights.
                _ => continue,
            };
            tensors.insert(name, (view.shape().to_vec(), values));
        }
        Ok(TensorStore { tensors })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        self.tensors
            .get(name)
            .map(|(s, _)| s.as_slice())
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))
    }

    fn raw(&self, name: &str, rank: usize) -> Result<(&[usize], &[f32])> {
        let (shape, values) = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))?;
        if shape.len() != rank {
            return Err(Error::Format(format!("tensor `{name}` has rank {}, expected {rank}", shape.len())));
        }
        Ok((shape, values))
    }

    pub fn vector<T: Scalar>(&self, name: &str) -> Result<Array1<T>> {
        let (_, v) = self.raw(name, 1)?;
        Ok(v.iter().map(|&x| T::lit(x as f64)).collect())
    }

    pub fn matrix<T: Scalar>(&self, name: &str) -> Result<Array2<T>> {
        let (shape, v) = self.raw(name, 2)?;
        let data = v.iter().map(|&x| T::lit(x as f64)).collect();
        Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| Error::Format(format!("{name}: {e}")))
    }

    /// A rank-4 convolution kernel flattened to `out × (in·kh·kw)`.
    pub fn kernel<T: Scalar>(&self, name: &str) -> Result<(Array2<T>, usize)> {
        let (shape, v) = self.raw(name, 4)?;
        if shape[2] != shape[3] {
            return Err(Error::Format(format!("tensor `{name}` has a non-square kernel")));
        }
        let data = v.iter().map(|&x| T::lit(x as f64)).collect();
        let m = Array2::from_shape_vec((shape[0], shape[1] * shape[2] * shape[3]), data)
            .map_err(|e| Error::Format(format!("{name}: {e}")))?;
        Ok((m, shape[2]))
    }

    /// Number of `{prefix}{i}.` blocks present.
    pub fn count_blocks(&self, prefix: &str) -> usize {
        let mut n = 0;
        while self.tensors.keys().any(|k| k.starts_with(&format!("{prefix}{n}."))) {
            n += 1;
        }
        n
    }

    /// Digest of every tensor, in name order.
    pub fn digest(&self, names: impl Fn(&str) -> bool) -> String {
        let mut keys: Vec<&String> = self.tensors.keys().filter(|k| names(k)).collect();
        keys.sort();
        let mut fp = crate::tensor::Fingerprint::new();
        for k in keys {
            let (shape, values) = &self.tensors[k];
            fp.tag(k);
            for d in shape {
                fp.bytes(&(*d as u64).to_le_bytes());
            }
            for v in values {
                fp.bytes(&v.to_le_bytes());
            }
        }
        fp.hex()
    }
}

/// Architecture hints from an accompanying `config.json`, when there is one.
#[derive(Debug, Clone, Default)]
pub struct TowerHints {
    pub heads: Option<usize>,
    pub ln_eps: Option<f64>,
    pub hidden_act: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ConfigHints {
    pub text: TowerHints,
    pub vision: TowerHints,
}

impl ConfigHints {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let tower = |key: &str| {
            let c = &v[key];
            TowerHints {
                heads: c["num_attention_heads"].as_u64().map(|h| h as usize),
                ln_eps: c["layer_norm_eps"].as_f64(),
                hidden_act: c["hidden_act"].as_str().map(String::from),
            }
        };
        Ok(ConfigHints {
            text: tower("text_config"),
            vision: tower("vision_config"),
        })
    }
}

fn heads_for(width: usize, hints: &TowerHints) -> Result<usize> {
    let heads = hints.heads.unwrap_or(width / 64).max(1);
    if !width.is_multiple_of(heads) {
        return Err(Error::Format(format!("width {width} is not divisible into {heads} heads")));
    }
    if let Some(act) = &hints.hidden_act {
        if act != "quick_gelu" {
            return Err(Error::Backend(format!("activation `{act}` is not supported (expected quick_gelu)")));
        }
    }
    Ok(heads)
}

#[derive(Debug, Clone)]
pub struct TextTower<T> {
    pub token_embedding: Arc<Array2<T>>,
    pub positional: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub final_ln: LayerNorm<T>,
    /// `width × output_dim`.
    pub projection: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct VisionTower<T> {
    /// `width × (3·p·p)`.
    pub patch: Array2<T>,
    pub patch_size: usize,
    pub image_size: usize,
    pub class_embedding: Array1<T>,
    pub positional: Array2<T>,
    pub pre_ln: LayerNorm<T>,
    pub blocks: Vec<Block<T>>,
    pub post_ln: LayerNorm<T>,
    /// `width × output_dim`.
    pub projection: Array2<T>,
}

fn norm<T: Scalar>(store: &TensorStore, prefix: &str, eps: f64) -> Result<LayerNorm<T>> {
    Ok(LayerNorm {
        gamma: store.vector(&format!("{prefix}.weight"))?,
        beta: store.vector(&format!("{prefix}.bias"))?,
        eps,
    })
}

fn linear<T: Scalar>(store: &TensorStore, prefix: &str) -> Result<Linear<T>> {
    let bias_name = format!("{prefix}.bias");
    Ok(Linear {
        weight: store.matrix(&format!("{prefix}.weight"))?,
        bias: if store.contains(&bias_name) { Some(store.vector(&bias_name)?) } else { None },
    })
}

fn hf_block<T: Scalar>(store: &TensorStore, p: &str, heads: usize, eps: f64) -> Result<Block<T>> {
    Ok(Block {
        ln1: norm(store, &format!("{p}.layer_norm1"), eps)?,
        q: linear(store, &format!("{p}.self_attn.q_proj"))?,
        k: linear(store, &format!("{p}.self_attn.k_proj"))?,
        v: linear(store, &format!("{p}.self_attn.v_proj"))?,
        out: linear(store, &format!("{p}.self_attn.out_proj"))?,
        ln2: norm(store, &format!("{p}.layer_norm2"), eps)?,
        fc1: linear(store, &format!("{p}.mlp.fc1"))?,
        fc2: linear(store, &format!("{p}.mlp.fc2"))?,
        heads,
    })
}

fn openai_block<T: Scalar>(store: &TensorStore, p: &str, heads: usize, eps: f64) -> Result<Block<T>> {
    let in_w: Array2<T> = store.matrix(&format!("{p}.attn.in_proj_weight"))?;
    let in_b: Array1<T> = store.vector(&format!("{p}.attn.in_proj_bias"))?;
    let d = in_w.ncols();
    if in_w.nrows() != 3 * d || in_b.len() != 3 * d {
        return Err(Error::Format(format!("{p}.attn.in_proj has an unexpected shape")));
    }
    let part = |i: usize| Linear {
        weight: in_w.slice(s![i * d..(i + 1) * d, ..]).to_owned(),
        bias: Some(in_b.slice(s![i * d..(i + 1) * d]).to_owned()),
    };
    Ok(Block {
        ln1: norm(store, &format!("{p}.ln_1"), eps)?,
        q: part(0),
        k: part(1),
        v: part(2),
        out: linear(store, &format!("{p}.attn.out_proj"))?,
        ln2: norm(store, &format!("{p}.ln_2"), eps)?,
        fc1: linear(store, &format!("{p}.mlp.c_fc"))?,
        fc2: linear(store, &format!("{p}.mlp.c_proj"))?,
        heads,
    })
}

pub fn detect_layout(store: &TensorStore) -> Result<Layout> {
    if store.contains("text_model.embeddings.token_embedding.weight") {
        Ok(Layout::HuggingFace)
    } else if store.contains("token_embedding.weight") {
        Ok(Layout::OpenAi)
    } else {
        Err(Error::Format("no CLIP text tower found (neither Hugging Face nor OpenAI tensor names)".into()))
    }
}

pub fn text_tower<T: Scalar>(store: &TensorStore, layout: Layout, hints: &TowerHints) -> Result<TextTower<T>> {
    let eps = hints.ln_eps.unwrap_or(DEFAULT_LN_EPS);
    let (emb, pos, prefix, final_ln) = match layout {
        Layout::HuggingFace => (
            "text_model.embeddings.token_embedding.weight",
            "text_model.embeddings.position_embedding.weight",
            "text_model.encoder.layers.",
            "text_model.final_layer_norm",
        ),
        Layout::OpenAi => ("token_embedding.weight", "positional_embedding", "transformer.resblocks.", "ln_final"),
    };
    let token_embedding: Array2<T> = store.matrix(emb)?;
    let width = token_embedding.ncols();
    let heads = heads_for(width, hints)?;
    let layers = store.count_blocks(prefix);
    if layers == 0 {
        return Err(Error::Format("text tower has no transformer blocks".into()));
    }
    let blocks = (0..layers)
        .map(|i| match layout {
            Layout::HuggingFace => hf_block(store, &format!("{prefix}{i}"), heads, eps),
            Layout::OpenAi => openai_block(store, &format!("{prefix}{i}"), heads, eps),
        })
        .collect::<Result<Vec<_>>>()?;
    let projection = match layout {
        Layout::HuggingFace => store.matrix::<T>("text_projection.weight")?.reversed_axes().as_standard_layout().to_owned(),
        Layout::OpenAi => store.matrix("text_projection")?,
    };
    if projection.nrows() != width {
        return Err(Error::Format(format!("text projection has {} input rows, tower width is {width}", projection.nrows())));
    }
    Ok(TextTower {
        token_embedding: Arc::new(token_embedding),
        positional: store.matrix(pos)?,
        blocks,
        final_ln: norm(store, final_ln, eps)?,
        projection,
    })
}

pub fn detect_vision(store: &TensorStore, layout: Layout) -> Result<VisionKind> {
    let (patch, pos, prefix) = match layout {
        Layout::HuggingFace => (
            "vision_model.embeddings.patch_embedding.weight",
            "vision_model.embeddings.position_embedding.weight",
            "vision_model.encoder.layers.",
        ),
        Layout::OpenAi => ("visual.conv1.weight", "visual.positional_embedding", "visual.transformer.resblocks."),
    };
    if store.contains(patch) && store.contains(pos) {
        let ps = store.shape(patch)?;
        let positions = store.shape(pos)?[0];
        let grid = ((positions.saturating_sub(1)) as f64).sqrt().round() as usize;
        if grid * grid + 1 != positions {
            return Err(Error::Format(format!("{positions} vision positions do not form a square grid plus class token")));
        }
        return Ok(VisionKind::Vit {
            image_size: grid * ps[2],
            patch_size: ps[2],
            width: ps[0],
            layers: store.count_blocks(prefix),
        });
    }
    if layout == Layout::OpenAi && store.contains("visual.attnpool.c_proj.weight") {
        return Ok(VisionKind::ResNet {
            output_dim: store.shape("visual.attnpool.c_proj.weight")?[0],
        });
    }
    Err(Error::Format("no supported image tower found".into()))
}

pub fn vision_tower<T: Scalar>(store: &TensorStore, layout: Layout, hints: &TowerHints) -> Result<VisionTower<T>> {
    let eps = hints.ln_eps.unwrap_or(DEFAULT_LN_EPS);
    let VisionKind::Vit {
        image_size,
        patch_size,
        width,
        layers,
    } = detect_vision(store, layout)?
    else {
        return Err(Error::Backend("the ResNet image tower is not implemented; use a feature cache".into()));
    };
    let heads = heads_for(width, hints)?;
    let tower = match layout {
        Layout::HuggingFace => VisionTower {
            patch: store.kernel("vision_model.embeddings.patch_embedding.weight")?.0,
            patch_size,
            image_size,
            class_embedding: store.vector("vision_model.embeddings.class_embedding")?,
            positional: store.matrix("vision_model.embeddings.position_embedding.weight")?,
            pre_ln: norm(store, "vision_model.pre_layrnorm", eps)?,
            blocks: (0..layers)
                .map(|i| hf_block(store, &format!("vision_model.encoder.layers.{i}"), heads, eps))
                .collect::<Result<_>>()?,
            post_ln: norm(store, "vision_model.post_layernorm", eps)?,
            projection: store.matrix::<T>("visual_projection.weight")?.reversed_axes().as_standard_layout().to_owned(),
        },
        Layout::OpenAi => VisionTower {
            patch: store.kernel("visual.conv1.weight")?.0,
            patch_size,
            image_size,
            class_embedding: store.vector("visual.class_embedding")?,
            positional: store.matrix("visual.positional_embedding")?,
            pre_ln: norm(store, "visual.ln_pre", eps)?,
            blocks: (0..layers)
                .map(|i| openai_block(store, &format!("visual.transformer.resblocks.{i}"), heads, eps))
                .collect::<Result<_>>()?,
            post_ln: norm(store, "visual.ln_post", eps)?,
            projection: store.matrix("visual.proj")?,
        },
    };
    if tower.projection.nrows() != width {
        return Err(Error::Format("image projection does not match the tower width".into()));
    }
    Ok(tower)
}
