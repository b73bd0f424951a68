//! CLIP adapter against reference outputs of a tiny randomly initialized
//! checkpoint (see `fixtures/clip_tiny/generate.py`).

use std::fs;
use std::path::{Path, PathBuf};

use cosmo::encoders::clip::{load_clip, preprocess, resolve_checkpoint, ClipBackend, PIXEL_MEAN, PIXEL_STD};
use cosmo::encoders::{ImageEncoder, PhraseEmbedder, TextEncoder, TokenBank};
use cosmo::label::build_label_space;
use cosmo::Error;
use ndarray::{Array1, Array2, Array3};
use serde_json::Value;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/clip_tiny")
}

fn reference() -> Value {
    serde_json::from_str(&fs::read_to_string(fixture_dir().join("reference.json")).unwrap()).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn ids(v: &Value) -> Vec<u32> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as u32).collect()
}

fn backend64() -> ClipBackend<f64> {
    load_clip(fixture_dir().to_str().unwrap()).unwrap()
}

/// Copies the tokenizer and config next to `weights` in a fresh directory.
fn staged(weights: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for f in ["vocab.json", "merges.txt", "config.json"] {
        fs::copy(fixture_dir().join(f), dir.path().join(f)).unwrap();
    }
    fs::copy(fixture_dir().join(weights), dir.path().join("model.safetensors")).unwrap();
    dir
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn embed_ids(be: &ClipBackend<f64>, text: &str) -> Array2<f64> {
    be.embedder.embed_phrase(text).unwrap()
}

#[test]
fn tokenizer_matches_reference_ids() {
    let be = backend64();
    let r = reference();
    for (text, expected) in r["tokens"].as_object().unwrap() {
        assert_eq!(be.embedder.token_ids(text).unwrap(), ids(expected), "{text}");
    }
}

#[test]
fn dimensions_come_from_the_checkpoint() {
    let be = backend64();
    assert_eq!(be.image.feature_dim(), 24);
    assert_eq!(be.text.output_dim(), 24);
    assert_eq!(be.text.token_dim(), 32);
    assert_eq!(be.text.max_sequence_length(), 75);
    assert_eq!(be.image.image_size().unwrap(), 32);
}

#[test]
fn text_features_match_reference() {
    let be = backend64();
    let r = reference();
    for (text, expected) in r["prompts"].as_object().unwrap() {
        let raw = be.text.raw_features(embed_ids(&be, text).view()).unwrap();
        let err = max_abs_diff(raw.as_slice().unwrap(), &floats(expected));
        assert!(err < 1e-5, "{text}: {err}");
        let unit = be.text.encode(embed_ids(&be, text).view()).unwrap();
        assert!((unit.dot(&unit) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn input_gradient_matches_reference_autograd() {
    let be = backend64();
    let r = reference();
    let ids = ids(&r["grad_ids"]);
    assert_eq!(be.embedder.token_ids("a photo of a back pack").unwrap(), ids);
    let table = embed_ids(&be, "a photo of a back pack");
    let cot = Array1::from(floats(&r["cotangent"]));
    let (_, tape) = be.text.forward(table.view()).unwrap();
    let grad = be.text.backward(&tape, cot.view());
    let expected: Vec<f64> = r["grad"].as_array().unwrap().iter().flat_map(floats).collect();
    let scale = expected.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = max_abs_diff(grad.as_slice().unwrap(), &expected);
    assert!(err < 1e-5 * scale.max(1.0), "{err} (scale {scale})");
}

#[test]
fn input_gradient_matches_finite_differences() {
    let be = backend64();
    let tokens = embed_ids(&be, "a photo of a sports car");
    let probe = Array1::from_iter((0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0));
    let (_, tape) = be.text.forward(tokens.view()).unwrap();
    let grad = be.text.backward(&tape, probe.view());
    let f = |t: &Array2<f64>| be.text.encode(t.view()).unwrap().dot(&probe);
    let h = 1e-5;
    for idx in [(0, 0), (2, 5), (4, 17), (5, 31)] {
        let mut a = tokens.clone();
        a[idx] += h;
        let mut b = tokens.clone();
        b[idx] -= h;
        let numeric = (f(&a) - f(&b)) / (2.0 * h);
        let analytic = grad[idx];
        let scale = numeric.abs().max(analytic.abs()).max(1e-6);
        assert!((numeric - analytic).abs() / scale < 1e-5, "{idx:?}: {numeric} vs {analytic}");
    }
}

#[test]
fn image_features_match_reference() {
    let be = backend64();
    let r = reference();
    let pixels = Array3::from_shape_vec((3, 32, 32), floats(&r["pixels"])).unwrap();
    let raw = be.image.raw_features(pixels.view()).unwrap();
    let err = max_abs_diff(raw.as_slice().unwrap(), &floats(&r["image_features"]));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn openai_layout_loads_to_the_same_model() {
    let dir = staged("openai_layout.safetensors");
    let openai: ClipBackend<f64> = load_clip(dir.path().to_str().unwrap()).unwrap();
    let hf = backend64();
    for text in ["a photo of a back pack", "unknown."] {
        let a = openai.text.raw_features(embed_ids(&openai, text).view()).unwrap();
        let b = hf.text.raw_features(embed_ids(&hf, text).view()).unwrap();
        assert!(max_abs_diff(a.as_slice().unwrap(), b.as_slice().unwrap()) < 1e-9);
    }
    let r = reference();
    let pixels = Array3::from_shape_vec((3, 32, 32), floats(&r["pixels"])).unwrap();
    let a = openai.image.raw_features(pixels.view()).unwrap();
    let b = hf.image.raw_features(pixels.view()).unwrap();
    assert!(max_abs_diff(a.as_slice().unwrap(), b.as_slice().unwrap()) < 1e-9);
}

#[test]
fn resnet_width_is_read_from_the_projection() {
    let dir = staged("resnet_layout.safetensors");
    let be: ClipBackend<f32> = load_clip(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(be.image.feature_dim(), 24);
    assert_eq!(be.text.output_dim(), 24);
    let png = dir.path().join("x.png");
    image::RgbImage::from_pixel(8, 8, image::Rgb([10, 20, 30])).save(&png).unwrap();
    assert!(matches!(be.image.encode_image(&png), Err(Error::Backend(_))));
    // Cached features still work.
    let v = be.image.encode_feature(Array1::from_elem(24, 2.0f32).view()).unwrap();
    assert!((v.dot(&v) - 1.0).abs() < 1e-6);
}

#[test]
fn image_files_are_preprocessed_and_encoded() {
    let be = backend64();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.png");
    image::RgbImage::from_pixel(48, 40, image::Rgb([255, 128, 0])).save(&path).unwrap();
    let px: Array3<f64> = preprocess(&path, 32).unwrap();
    assert_eq!(px.dim(), (3, 32, 32));
    for (c, value) in [255.0, 128.0, 0.0].into_iter().enumerate() {
        let expected = (value / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
        assert!(px.index_axis(ndarray::Axis(0), c).iter().all(|v| (v - expected).abs() < 1e-9));
    }
    let v = be.image.encode_image(&path).unwrap();
    assert_eq!(v.len(), 24);
    assert!((v.dot(&v) - 1.0).abs() < 1e-12);
    let direct = be.image.encode_feature(be.image.raw_features(px.view()).unwrap().view()).unwrap();
    assert!(max_abs_diff(v.as_slice().unwrap(), direct.as_slice().unwrap()) < 1e-12);
}

#[test]
fn class_token_sequences_are_frozen_table_rows() {
    let be = backend64();
    let labels = build_label_space(["back_pack", "mug"]).unwrap();
    let bank: TokenBank<f64> = be.token_bank(&labels).unwrap();
    let seq = bank.class_tokens(0);
    assert_eq!(seq.nrows(), 2);
    assert_eq!(seq, embed_ids(&be, "back pack"));
    assert_eq!(bank.unk_tokens(), embed_ids(&be, "unknown."));
    let again: TokenBank<f64> = backend64().token_bank(&labels).unwrap();
    assert_eq!(bank.checksum(), again.checksum());
}

#[test]
fn overlong_class_name_is_a_validation_error() {
    let be = backend64();
    let long = vec!["back pack"; 36].join(" ");
    let labels = build_label_space([long.as_str(), "mug"]).unwrap();
    let bank: TokenBank<f64> = be.token_bank(&labels).unwrap();
    assert_eq!(bank.class_tokens(0).nrows(), 72);
    assert!(bank.check_fits(3, be.text.max_sequence_length()).is_ok());
    let err = bank.check_fits(4, be.text.max_sequence_length()).unwrap_err();
    assert!(err.is_validation(), "{err}");
    let tokens = Array2::zeros((76, 32));
    assert!(be.text.encode(tokens.view()).unwrap_err().is_validation());
}

#[test]
fn missing_and_corrupt_checkpoints_are_errors() {
    assert!(load_clip::<f32>("/nonexistent/clip/checkpoint").is_err());
    let dir = staged("model.safetensors");
    fs::write(dir.path().join("model.safetensors"), b"not a tensor file").unwrap();
    assert!(matches!(load_clip::<f32>(dir.path().to_str().unwrap()), Err(Error::Format(_))));
    fs::remove_file(dir.path().join("merges.txt")).unwrap();
    assert!(resolve_checkpoint(dir.path().to_str().unwrap()).is_err());
}

#[test]
fn file_reference_resolves_to_its_directory() {
    let files = resolve_checkpoint(fixture_dir().join("model.safetensors").to_str().unwrap()).unwrap();
    assert_eq!(files.vocab, fixture_dir().join("vocab.json"));
    assert!(files.config.is_some());
}

#[test]
fn frozen_checksums_are_stable() {
    let a = backend64();
    let b = backend64();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a.text.checksum(), b.text.checksum());
    assert_ne!(ImageEncoder::checksum(&a.image), a.text.checksum());
}
