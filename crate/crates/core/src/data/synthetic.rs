//! Gaussian-cluster datasets in the toy backend's feature space.
//!
//! Known class centers are the toy text encodings of the bare class phrases,
//! so a prompt that reproduces the class tokens is already roughly aligned.
//! Unknown class centers are orthogonal to every known center, which puts
//! them at equal similarity to every known prompt. Each domain adds an offset
//! orthogonal to all class centers, and each sample adds isotropic noise.
//! Within a target domain every class is also pulled toward one randomly
//! chosen known class, so target images resemble a different known class than
//! they do in the source.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_manifest, write_split_file, ExampleRecord, FeatureCacheWriter, ItemRef, SplitFile, MANIFEST_FILE};
use crate::encoders::{class_phrase, PhraseEmbedder, TextEncoder, ToyBackend};
use crate::error::{validation, Error, Result};
use crate::label::SplitSpec;
use crate::tensor::{gaussian, l2_normalize};

const CLASS_WORDS: [&str; 16] = [
    "apple", "bicycle", "camera", "desk", "lamp", "mug", "piano", "rocket", "scissors", "teapot", "violin", "wallet",
    "kettle", "helmet", "stapler", "trumpet",
];

/// Features directory inside a dataset root.
pub const FEATURES_DIR: &str = "features";
/// Held-out dataset root inside a synthetic dataset root.
pub const HELDOUT_DIR: &str = "heldout";
/// Split file written next to the manifest.
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub known_classes: usize,
    pub unknown_classes: usize,
    pub target_domains: usize,
    /// Source examples per known class.
    pub source_per_class: usize,
    /// Training target examples per class per target domain.
    pub target_per_class: usize,
    /// Held-out target examples per class per target domain.
    pub heldout_per_class: usize,
    /// Norm of each domain's offset.
    pub domain_shift: f64,
    /// Expected norm of the per-sample noise.
    pub noise: f64,
    /// Weight of the pull toward a look-alike known class in target domains.
    pub class_style: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            known_classes: 5,
            unknown_classes: 3,
            target_domains: 2,
            source_per_class: 40,
            target_per_class: 30,
            heldout_per_class: 30,
            domain_shift: 0.5,
            noise: 0.1,
            class_style: 0.0,
            seed: 0,
        }
    }
}

/// Records plus raw feature vectors keyed by record path.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub split: SplitSpec,
    pub train: Vec<ExampleRecord>,
    pub heldout: Vec<ExampleRecord>,
    pub train_features: Vec<(String, Array1<f64>)>,
    pub heldout_features: Vec<(String, Array1<f64>)>,
}

fn domain_names(targets: usize) -> (String, Vec<String>) {
    let targets = (0..targets).map(|i| format!("target_{}", (b'a' + i as u8) as char)).collect();
    ("source".to_string(), targets)
}

pub fn generate_synthetic(cfg: &SyntheticConfig, backend: &ToyBackend<f64>) -> Result<SyntheticDataset> {
    let total = cfg.known_classes + cfg.unknown_classes;
    if cfg.known_classes == 0 || cfg.unknown_classes == 0 {
        return Err(validation("synthetic data needs at least one known and one unknown class"));
    }
    if total > CLASS_WORDS.len() {
        return Err(validation(format!("at most {} synthetic classes are available", CLASS_WORDS.len())));
    }
    if cfg.target_domains == 0 || cfg.target_domains > 26 {
        return Err(validation("synthetic data needs between 1 and 26 target domains"));
    }
    let dim = backend.text.output_dim();
    let classes: Vec<String> = CLASS_WORDS[..total].iter().map(|s| s.to_string()).collect();
    if dim < total + cfg.target_domains + 1 {
        return Err(validation(format!(
            "feature dimension {dim} is too small for {total} classes and {} domains",
            cfg.target_domains + 1
        )));
    }
    let mut centers = CLASS_WORDS[..cfg.known_classes]
        .iter()
        .map(|c| {
            let tokens = PhraseEmbedder::<f64>::embed_phrase(&backend.embedder, &class_phrase(c))?;
            backend.text.encode(tokens.view())
        })
        .collect::<Result<Vec<_>>>()?;

    let (source, targets) = domain_names(cfg.target_domains);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for c in &centers {
        basis.push(orthogonal_direction(c.clone(), &basis));
    }
    for _ in 0..cfg.unknown_classes {
        let u = orthogonal_direction(gaussian(dim, 1.0, &mut rng), &basis);
        // Keep unknown centers mutually orthogonal as well.
        basis.push(u.clone());
        centers.push(u);
    }
    let mut offset = |rng: &mut ChaCha8Rng| -> Array1<f64> {
        let dir = orthogonal_direction(gaussian(dim, 1.0, rng), &basis);
        basis.push(dir.clone());
        dir * cfg.domain_shift
    };
    let source_offset = offset(&mut rng);
    let target_offsets: Vec<_> = targets.iter().map(|_| offset(&mut rng)).collect();
    let noise_std = cfg.noise / (dim as f64).sqrt();
    let styles: Vec<Vec<Array1<f64>>> = target_offsets
        .iter()
        .map(|off| {
            (0..total)
                .map(|c| {
                    let partner = if c < cfg.known_classes && cfg.known_classes > 1 {
                        (c + rng.random_range(1..cfg.known_classes)) % cfg.known_classes
                    } else {
                        rng.random_range(0..cfg.known_classes)
                    };
                    off + &(&centers[partner] * cfg.class_style)
                })
                .collect()
        })
        .collect();

    let sample = |rng: &mut ChaCha8Rng, class: usize, shift: &Array1<f64>| -> Array1<f64> {
        let n: Array1<f64> = gaussian(dim, noise_std, rng);
        &centers[class] + shift + n
    };

    let mut train = Vec::new();
    let mut train_features = Vec::new();
    let mut heldout = Vec::new();
    let mut heldout_features = Vec::new();
    let push = |records: &mut Vec<ExampleRecord>,
                    feats: &mut Vec<(String, Array1<f64>)>,
                    domain: &str,
                    class: &str,
                    i: usize,
                    x: Array1<f64>| {
        let path = PathBuf::from(format!("{domain}/{class}/{i:04}.feat"));
        let rec = ExampleRecord {
            item_ref: ItemRef::Path(path),
            class_name: Some(class.to_string()),
            domain_tag: domain.to_string(),
            is_source: false,
        };
        feats.push((rec.item_ref.cache_key(), x));
        records.push(rec);
    };

    for (c, class) in classes.iter().enumerate().take(cfg.known_classes) {
        for i in 0..cfg.source_per_class {
            let x = sample(&mut rng, c, &source_offset);
            push(&mut train, &mut train_features, &source, class, i, x);
        }
    }
    for (d, domain) in targets.iter().enumerate() {
        for (c, class) in classes.iter().enumerate() {
            for i in 0..cfg.target_per_class {
                let x = sample(&mut rng, c, &styles[d][c]);
                push(&mut train, &mut train_features, domain, class, i, x);
            }
            for i in 0..cfg.heldout_per_class {
                let x = sample(&mut rng, c, &styles[d][c]);
                push(&mut heldout, &mut heldout_features, domain, class, i, x);
            }
        }
    }

    let split = SplitSpec {
        dataset_name: "synthetic".into(),
        source_domain: source,
        target_domains: targets,
        known_classes: classes[..cfg.known_classes].to_vec(),
        unknown_classes: classes[cfg.known_classes..].to_vec(),
        seed: cfg.seed,
    };
    split.validate()?;
    Ok(SyntheticDataset {
        split,
        train,
        heldout,
        train_features,
        heldout_features,
    })
}

/// Unit vector along `v` with its components in `basis` (orthonormal) removed.
fn orthogonal_direction(mut v: Array1<f64>, basis: &[Array1<f64>]) -> Array1<f64> {
    for q in basis {
        let along = q.dot(&v);
        v.scaled_add(-along, q);
    }
    l2_normalize(v.view())
}

fn write_root(root: &Path, records: &[ExampleRecord], feats: &[(String, Array1<f64>)]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_manifest(&root.join(MANIFEST_FILE), records)?;
    let mut writer = FeatureCacheWriter::new(root.join(FEATURES_DIR));
    for (id, x) in feats {
        writer.push(id.clone(), None, x.as_slice().expect("contiguous"));
    }
    writer.finish()?;
    Ok(())
}

impl SyntheticDataset {
    /// Writes `root/{manifest.tsv,features/,split.json}` and the same layout under `root/heldout/`.
    pub fn write(&self, root: &Path) -> Result<()> {
        write_root(root, &self.train, &self.train_features)?;
        write_root(&root.join(HELDOUT_DIR), &self.heldout, &self.heldout_features)?;
        let file = SplitFile {
            dataset_root: PathBuf::from("."),
            split: self.split.clone(),
        };
        write_split_file(&root.join(SPLIT_FILE), &file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::toy_backend;

    #[test]
    fn layout_and_counts() {
        let be = toy_backend::<f64>(16, 16, 3).unwrap();
        let cfg = SyntheticConfig {
            source_per_class: 4,
            target_per_class: 3,
            heldout_per_class: 2,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg, &be).unwrap();
        assert_eq!(ds.train.len(), 5 * 4 + 2 * 8 * 3);
        assert_eq!(ds.heldout.len(), 2 * 8 * 2);
        assert_eq!(ds.split.target_domains, ["target_a", "target_b"]);
        assert!(ds.train.iter().filter(|r| r.domain_tag == ds.split.source_domain).all(|r| ds.split.is_known(r.class_name.as_deref().unwrap())));
    }

    #[test]
    fn same_seed_same_features() {
        let be = toy_backend::<f64>(16, 16, 1).unwrap();
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic(&cfg, &be).unwrap();
        let b = generate_synthetic(&cfg, &be).unwrap();
        assert_eq!(a.train_features, b.train_features);
        let c = generate_synthetic(&SyntheticConfig { seed: 1, ..cfg }, &be).unwrap();
        assert_ne!(a.train_features, c.train_features);
    }
}
