//! Checkpoint directory: `meta.json` plus one raw little-endian blob per tensor.
//!
//! ```text
//! checkpoint/
//!   meta.json
//!   tensors/known_context.bin
//!   tensors/adam.known_context.m.bin
//!   ...
//! ```
//! Blobs use the scalar's native width (`f32` in normal training). Writes go
//! to a sibling temp directory which is then swapped in.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array, Dimension, IntoDimension};
use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::config::TrainConfig;
use crate::data::write_atomic;
use crate::error::{validation, Error, Result};
use crate::scalar::{decode_le, encode_le, Scalar};
use crate::tensor::Fingerprint;

pub const CHECKPOINT_VERSION: u32 = 1;
/// Checkpoint directory name inside a run directory.
pub const CHECKPOINT_DIR: &str = "checkpoint";
const META_FILE: &str = "meta.json";
const TENSOR_DIR: &str = "tensors";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dtype: String,
    pub iteration: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    /// Caller-supplied description of the frozen backend.
    pub backend: serde_json::Value,
    pub tensors: BTreeMap<String, TensorInfo>,
    pub adam_steps: BTreeMap<String, u64>,
}

fn with_tensors<T: Scalar>(state: &TrainState<T>, mut f: impl FnMut(&str, Vec<usize>, &[T])) {
    fn put<T: Scalar, D: Dimension>(f: &mut impl FnMut(&str, Vec<usize>, &[T]), name: &str, a: &Array<T, D>) {
        let a = a.as_standard_layout();
        f(name, a.shape().to_vec(), a.as_slice().expect("standard layout"));
    }
    let p = &state.prompts;
    let b = &state.bias;
    let o = &state.optimizer;
    put(&mut f, "known_context", &p.known_context);
    put(&mut f, "unknown_context", &p.unknown_context);
    put(&mut f, "bias.w1", &b.w1);
    put(&mut f, "bias.b1", &b.b1);
    put(&mut f, "bias.w2", &b.w2);
    put(&mut f, "bias.b2", &b.b2);
    put(&mut f, "adam.known_context.m", &o.known_context.m);
    put(&mut f, "adam.known_context.v", &o.known_context.v);
    put(&mut f, "adam.unknown_context.m", &o.unknown_context.m);
    put(&mut f, "adam.unknown_context.v", &o.unknown_context.v);
    put(&mut f, "adam.bias.w1.m", &o.w1.m);
    put(&mut f, "adam.bias.w1.v", &o.w1.v);
    put(&mut f, "adam.bias.b1.m", &o.b1.m);
    put(&mut f, "adam.bias.b1.v", &o.b1.v);
    put(&mut f, "adam.bias.w2.m", &o.w2.m);
    put(&mut f, "adam.bias.w2.v", &o.w2.v);
    put(&mut f, "adam.bias.b2.m", &o.b2.m);
    put(&mut f, "adam.bias.b2.v", &o.b2.v);
}

fn adam_steps<T: Scalar>(state: &TrainState<T>) -> BTreeMap<String, u64> {
    let o = &state.optimizer;
    [
        ("known_context", o.known_context.step),
        ("unknown_context", o.unknown_context.step),
        ("bias.w1", o.w1.step),
        ("bias.b1", o.b1.step),
        ("bias.w2", o.w2.step),
        ("bias.b2", o.b2.step),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    dir.with_file_name(name)
}

/// Writes `state` to the checkpoint directory `dir`, replacing any previous one.
pub fn save_checkpoint<T: Scalar>(
    state: &TrainState<T>,
    cfg: &TrainConfig,
    backend: &serde_json::Value,
    dir: &Path,
) -> Result<CheckpointMeta> {
    let tmp = sibling(dir, ".tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let tensor_dir = tmp.join(TENSOR_DIR);
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;

    let mut tensors = BTreeMap::new();
    let mut failure = None;
    with_tensors(state, |name, shape, data| {
        if failure.is_some() {
            return;
        }
        let file = format!("{TENSOR_DIR}/{name}.bin");
        let bytes = encode_le(data);
        if let Err(e) = write_atomic(&tmp.join(&file), &bytes) {
            failure = Some(e);
            return;
        }
        let sha256 = Fingerprint::new().bytes(&bytes).hex();
        tensors.insert(name.to_string(), TensorInfo { shape, file, sha256 });
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.to_string(),
        iteration: state.iteration,
        seed: state.seed,
        config: cfg.clone(),
        class_names: state.prompts.token_bank.class_names().to_vec(),
        backend: backend.clone(),
        tensors,
        adam_steps: adam_steps(state),
    };
    let text = serde_json::to_string_pretty(&meta)? + "\n";
    write_atomic(&tmp.join(META_FILE), text.as_bytes())?;

    let old = sibling(dir, ".old");
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    if dir.exists() {
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(meta)
}

/// Directory to read: `dir` itself, or the previous copy if a swap was interrupted.
fn resolve(dir: &Path) -> PathBuf {
    let old = sibling(dir, ".old");
    if !dir.join(META_FILE).is_file() && old.join(META_FILE).is_file() {
        old
    } else {
        dir.to_path_buf()
    }
}

pub fn read_checkpoint_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = resolve(dir).join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format(format!("{}: missing format_version", path.display())))?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: found as u32,
        });
    }
    Ok(serde_json::from_value(value)?)
}

fn load_into<T: Scalar, D: Dimension>(
    root: &Path,
    meta: &CheckpointMeta,
    name: &str,
    target: &mut Array<T, D>,
) -> Result<()> {
    let info = meta
        .tensors
        .get(name)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))?;
    if info.shape != target.shape() {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: target.shape().to_vec(),
            found: info.shape.clone(),
        });
    }
    let path = root.join(&info.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if Fingerprint::new().bytes(&bytes).hex() != info.sha256 {
        return Err(Error::Format(format!("tensor `{name}` does not match its recorded digest")));
    }
    let data: Vec<T> = decode_le(&bytes)
        .filter(|d: &Vec<T>| d.len() == target.len())
        .ok_or_else(|| Error::Format(format!("tensor `{name}` has the wrong byte length")))?;
    let dim = D::from_dimension(&info.shape.clone().into_dimension())
        .ok_or_else(|| Error::Format(format!("tensor `{name}` has the wrong rank")))?;
    *target = Array::from_shape_vec(dim, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
    Ok(())
}

/// Loads the checkpoint at `dir` into `state`, which fixes every expected
/// shape and the label space. Nothing is modified on error.
pub fn load_checkpoint<T: Scalar>(dir: &Path, state: &mut TrainState<T>) -> Result<CheckpointMeta> {
    let meta = read_checkpoint_meta(dir)?;
    let root = resolve(dir);
    if meta.dtype != T::DTYPE {
        return Err(validation(format!(
            "checkpoint stores {} tensors, this run uses {}",
            meta.dtype,
            T::DTYPE
        )));
    }
    if meta.class_names != state.prompts.token_bank.class_names() {
        return Err(validation(format!(
            "checkpoint label space {:?} does not match the current one {:?}",
            meta.class_names,
            state.prompts.token_bank.class_names()
        )));
    }
    let mut next = state.clone();
    {
        let p = &mut next.prompts;
        let b = &mut next.bias;
        let o = &mut next.optimizer;
        load_into(&root, &meta, "known_context", &mut p.known_context)?;
        load_into(&root, &meta, "unknown_context", &mut p.unknown_context)?;
        load_into(&root, &meta, "bias.w1", &mut b.w1)?;
        load_into(&root, &meta, "bias.b1", &mut b.b1)?;
        load_into(&root, &meta, "bias.w2", &mut b.w2)?;
        load_into(&root, &meta, "bias.b2", &mut b.b2)?;
        load_into(&root, &meta, "adam.known_context.m", &mut o.known_context.m)?;
        load_into(&root, &meta, "adam.known_context.v", &mut o.known_context.v)?;
        load_into(&root, &meta, "adam.unknown_context.m", &mut o.unknown_context.m)?;
        load_into(&root, &meta, "adam.unknown_context.v", &mut o.unknown_context.v)?;
        load_into(&root, &meta, "adam.bias.w1.m", &mut o.w1.m)?;
        load_into(&root, &meta, "adam.bias.w1.v", &mut o.w1.v)?;
        load_into(&root, &meta, "adam.bias.b1.m", &mut o.b1.m)?;
        load_into(&root, &meta, "adam.bias.b1.v", &mut o.b1.v)?;
        load_into(&root, &meta, "adam.bias.w2.m", &mut o.w2.m)?;
        load_into(&root, &meta, "adam.bias.w2.v", &mut o.w2.v)?;
        load_into(&root, &meta, "adam.bias.b2.m", &mut o.b2.m)?;
        load_into(&root, &meta, "adam.bias.b2.v", &mut o.b2.v)?;
        let step = |k: &str| {
            meta.adam_steps
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("checkpoint is missing the step count of `{k}`")))
        };
        o.known_context.step = step("known_context")?;
        o.unknown_context.step = step("unknown_context")?;
        o.w1.step = step("bias.w1")?;
        o.b1.step = step("bias.b1")?;
        o.w2.step = step("bias.w2")?;
        o.b2.step = step("bias.b2")?;
    }
    next.iteration = meta.iteration;
    next.seed = meta.seed;
    next.prompts.shared = !meta.config.separate_prompts;
    *state = next;
    Ok(meta)
}
