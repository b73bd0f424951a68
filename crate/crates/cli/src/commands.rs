//! Command implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cosmo::config::{read_config_file, render_config};
use cosmo::data::synthetic::{generate_synthetic, SyntheticConfig, FEATURES_DIR, HELDOUT_DIR};
use cosmo::data::{
    blend_targets, encode_source_pool, encode_target_pool, load_dataset, make_open_set_split, read_feature_cache,
    read_split_file, target_sample_counts, write_split_file, ExampleRecord, FeatureCacheWriter, FeatureSource, SplitFile,
    CACHE_INDEX,
};
use cosmo::bias_net::{count_trainable_params, format_param_count};
use cosmo::encoders::{toy_backend, ImageEncoder, PhraseEmbedder, TokenBank};
use cosmo::eval::{compute_metrics, encode_eval_pool, evaluate, export_embeddings, zero_shot_baseline, zero_shot_text_features, EvalPool, MetricsReport};
use cosmo::label::{LabelSpace, SplitSpec};
use cosmo::trainer::{fit, load_checkpoint, read_checkpoint_meta, CheckpointMeta, FitOptions, TrainState, CHECKPOINT_DIR, STEPS_FILE};
use cosmo::{validate_config, Error, PartialTrainConfig, Result, TrainConfig};
use log::{info, warn};
use rayon::prelude::*;
use serde_json::json;

use crate::backend::{Backend, ToySpec};
use crate::manifest::{metrics_file, RunManifest, CONFIG_SNAPSHOT};
use crate::{with_backend, BackendArgs, EvalPool as PoolKind};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| io_err(p, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| io_err(path, e))
}

struct Dataset {
    root: PathBuf,
    records: Vec<ExampleRecord>,
    features: FeatureSource,
}

/// Records under `root` plus the feature cache in `root/features` when there is one.
fn open_dataset(root: &Path) -> Result<Dataset> {
    let outcome = load_dataset(root, &[])?;
    let cache_dir = root.join(FEATURES_DIR);
    let features = if cache_dir.join(CACHE_INDEX).is_file() {
        FeatureSource::Cache(read_feature_cache(&cache_dir)?)
    } else {
        FeatureSource::Images(root.to_path_buf())
    };
    Ok(Dataset {
        root: root.to_path_buf(),
        records: outcome.records,
        features,
    })
}

fn open_backend(args: &BackendArgs, ds: &Dataset) -> Result<Backend> {
    Backend::open(args.backend, args.weights.as_deref(), &ds.root, &ds.features)
}

pub fn split(
    dataset: &Path,
    n_known: usize,
    source: &str,
    targets: &[String],
    seed: u64,
    name: Option<String>,
    out: &Path,
) -> Result<()> {
    if targets.iter().any(|t| t == source) {
        return Err(Error::Validation(format!("`{source}` is both the source and a target domain")));
    }
    let mut domains = vec![source.to_string()];
    domains.extend(targets.iter().cloned());
    let outcome = load_dataset(dataset, &domains)?;
    let name = name.unwrap_or_else(|| {
        absolute(dataset)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let spec = make_open_set_split(&name, &outcome.class_names(), n_known, source, targets, seed)?;
    let file = SplitFile {
        dataset_root: absolute(dataset),
        split: spec.clone(),
    };
    write_split_file(out, &file)?;
    println!(
        "{}: {} known / {} unknown classes, source {}",
        spec.dataset_name,
        spec.known_classes.len(),
        spec.unknown_classes.len(),
        spec.source_domain
    );
    println!("{:<16}  {:>15}  {:>17}", "target domain", "# known samples", "# unknown samples");
    for t in targets {
        let one = SplitSpec {
            target_domains: vec![t.clone()],
            ..spec.clone()
        };
        let c = target_sample_counts(&outcome.records, &one);
        println!("{:<16}  {:>15}  {:>17}", t, c.known, c.unknown);
    }
    let total = target_sample_counts(&outcome.records, &spec);
    println!("{:<16}  {:>15}  {:>17}", "all targets", total.known, total.unknown);
    Ok(())
}

pub fn synth(out: &Path, dim: usize, cfg: SyntheticConfig) -> Result<()> {
    let spec = ToySpec {
        feature_dim: dim,
        token_dim: dim,
        seed: 0,
    };
    let generator = toy_backend::<f64>(dim, dim, spec.seed)?;
    let ds = generate_synthetic(&cfg, &generator)?;
    ds.write(out)?;
    spec.write(out)?;
    spec.write(&out.join(HELDOUT_DIR))?;
    println!(
        "wrote {} training and {} held-out records to {} ({} known, {} unknown classes)",
        ds.train.len(),
        ds.heldout.len(),
        out.display(),
        ds.split.known_classes.len(),
        ds.split.unknown_classes.len()
    );
    Ok(())
}

pub fn cache(dataset: &Path, args: &BackendArgs, out: Option<PathBuf>) -> Result<()> {
    let records = load_dataset(dataset, &[])?.records;
    let images = Dataset {
        root: dataset.to_path_buf(),
        records: Vec::new(),
        features: FeatureSource::Images(dataset.to_path_buf()),
    };
    let backend = open_backend(args, &images)?;
    let out = out.unwrap_or_else(|| dataset.join(FEATURES_DIR));
    let rows = with_backend!(&backend, |image, _text, _embedder| {
        records
            .par_iter()
            .map(|r| images.features.feature::<f32, _>(&r.item_ref, image))
            .collect::<Result<Vec<_>>>()?
    });
    let mut writer = FeatureCacheWriter::new(&out);
    for (r, v) in records.iter().zip(&rows) {
        let tag = format!("{}/{}", r.domain_tag, r.class_name.as_deref().unwrap_or(""));
        writer.push(r.item_ref.cache_key(), Some(tag), v.as_slice().expect("contiguous"));
    }
    let dir = writer.finish()?;
    println!("cached {} features in {}", rows.len(), dir.display());
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub split: PathBuf,
    pub backend: BackendArgs,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub resume: bool,
    pub halt_after: Option<usize>,
}

fn resolve_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let partial = read_config_file(path)?.overlay(PartialTrainConfig {
        seed,
        ..Default::default()
    });
    validate_config(partial)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, args.seed)?;
    let file = read_split_file(&args.split)?;
    let split = &file.split;
    let labels = split.label_space()?;
    let ds = open_dataset(&file.dataset_root)?;
    let backend = open_backend(&args.backend, &ds)?;
    let description = backend.describe();
    create_dir(&args.out)?;
    let snapshot = args.out.join(CONFIG_SNAPSHOT);
    fs::write(&snapshot, render_config(&cfg)).map_err(|e| io_err(&snapshot, e))?;
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: std::env::args().collect(),
        seed: cfg.seed,
        backend: description.clone(),
        config: cfg.clone(),
        config_file: absolute(&args.config),
        split_file: absolute(&args.split),
        split: split.clone(),
        checkpoint_dir: absolute(&args.out.join(CHECKPOINT_DIR)),
        reports: vec![absolute(&args.out.join(STEPS_FILE))],
        completed_iterations: 0,
    };
    manifest.write(&args.out)?;
    let opts = FitOptions {
        out_dir: Some(args.out.clone()),
        resume: args.resume,
        halt_after: args.halt_after,
        backend: description,
    };
    let outcome = with_backend!(&backend, |image, text, embedder| {
        let bank = TokenBank::build(embedder, &labels)?;
        let source = encode_source_pool(&ds.records, split, &labels, &ds.features, image)?;
        let blended = blend_targets(&ds.records, split, cfg.seed)?;
        let target = encode_target_pool(&blended, &ds.features, image)?;
        info!("source pool {} examples, blended target pool {}", source.len(), target.len());
        let state = TrainState::init(&cfg, bank, ImageEncoder::<f32>::feature_dim(image))?;
        fit(state, text, &source, &target, &cfg, &opts)?
    });
    manifest.completed_iterations = outcome.state.iteration;
    manifest.write(&args.out)?;
    if let Some(r) = outcome.reports.last() {
        println!(
            "iteration {}/{}: L_source {:.6} L_target {:.6} (known {}, unknown {}, discarded {})",
            outcome.state.iteration,
            cfg.total_iterations,
            r.l_source,
            r.l_target,
            r.counts.known,
            r.counts.unknown,
            r.counts.discarded
        );
    }
    if let Some(from) = outcome.resumed_from {
        println!("resumed from iteration {from}");
    }
    println!("run directory: {}", args.out.display());
    Ok(())
}

fn eval_pool<I: ImageEncoder<f32> + ?Sized>(
    ds: &Dataset,
    split: &SplitSpec,
    labels: &LabelSpace,
    kind: PoolKind,
    image: &I,
) -> Result<EvalPool<f32>> {
    match kind {
        PoolKind::Targets => encode_eval_pool(&ds.records, split, labels, &split.target_domains, &ds.features, image),
        PoolKind::Source => {
            let known: Vec<ExampleRecord> = ds
                .records
                .iter()
                .filter(|r| r.class_name.as_deref().is_some_and(|c| split.is_known(c)))
                .cloned()
                .collect();
            let domains = [split.source_domain.clone()];
            encode_eval_pool(&known, split, labels, &domains, &ds.features, image)
        }
    }
}

fn pool_name(kind: PoolKind) -> &'static str {
    match kind {
        PoolKind::Targets => "targets",
        PoolKind::Source => "source",
    }
}

fn checkpoint_dir(run: &Path) -> PathBuf {
    let nested = run.join(CHECKPOINT_DIR);
    if nested.is_dir() {
        nested
    } else {
        run.to_path_buf()
    }
}

/// Label space, dataset and backend a trained checkpoint is evaluated against.
struct Loaded {
    meta: CheckpointMeta,
    file: SplitFile,
    labels: LabelSpace,
    ds: Dataset,
    backend: Backend,
}

fn load_run(run: &Path, split: &Path, args: &BackendArgs, dataset: Option<PathBuf>) -> Result<(PathBuf, Loaded)> {
    let ckpt = checkpoint_dir(run);
    let meta = read_checkpoint_meta(&ckpt)?;
    let file = read_split_file(split)?;
    let labels = file.split.label_space()?;
    if meta.class_names != labels.known_classes() {
        return Err(Error::Validation(format!(
            "label space mismatch: checkpoint has {:?}, split has {:?}",
            meta.class_names,
            labels.known_classes()
        )));
    }
    let ds = open_dataset(&dataset.unwrap_or_else(|| file.dataset_root.clone()))?;
    let backend = open_backend(args, &ds)?;
    if backend.describe()["checksum"] != meta.backend["checksum"] {
        warn!("the backend differs from the one this checkpoint was trained with");
    }
    Ok((
        ckpt,
        Loaded {
            meta,
            file,
            labels,
            ds,
            backend,
        },
    ))
}

fn restore<I, P>(ckpt: &Path, l: &Loaded, image: &I, embedder: &P) -> Result<TrainState<f32>>
where
    I: ImageEncoder<f32> + ?Sized,
    P: PhraseEmbedder<f32> + ?Sized,
{
    let bank = TokenBank::build(embedder, &l.labels)?;
    let mut state = TrainState::init(&l.meta.config, bank, image.feature_dim())?;
    load_checkpoint(ckpt, &mut state)?;
    Ok(state)
}

fn report_metrics(report: &MetricsReport, header: serde_json::Value, pool: PoolKind, out: Option<&Path>) -> Result<()> {
    print!("{}", report.render_table());
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut doc = header;
        doc["metrics"] = report.to_json();
        let path = dir.join(metrics_file(pool_name(pool)));
        write_json(&path, &doc)?;
        println!("metrics written to {}", path.display());
    }
    Ok(())
}

pub fn eval(
    run: &Path,
    split: &Path,
    args: &BackendArgs,
    pool: PoolKind,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (ckpt, l) = load_run(run, split, args, dataset)?;
    let report = with_backend!(&l.backend, |image, text, embedder| {
        let state = restore(&ckpt, &l, image, embedder)?;
        let samples = eval_pool(&l.ds, &l.file.split, &l.labels, pool, image)?;
        compute_metrics(&evaluate(&state, text, &samples, &l.meta.config)?, &l.labels)?
    });
    let header = json!({
        "checkpoint": absolute(&ckpt),
        "iteration": l.meta.iteration,
        "pool": pool_name(pool),
        "dataset_root": absolute(&l.ds.root),
    });
    let out = out.unwrap_or_else(|| run.to_path_buf());
    report_metrics(&report, header, pool, Some(&out))
}

pub fn baseline(
    split: &Path,
    args: &BackendArgs,
    pool: PoolKind,
    dataset: Option<PathBuf>,
    threshold: f64,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Validation(format!("threshold {threshold} is outside [0, 1]")));
    }
    let cfg = match config {
        Some(p) => resolve_config(&p, None)?,
        None => TrainConfig::default(),
    };
    let file = read_split_file(split)?;
    let labels = file.split.label_space()?;
    let ds = open_dataset(&dataset.unwrap_or_else(|| file.dataset_root.clone()))?;
    let backend = open_backend(args, &ds)?;
    let report = with_backend!(&backend, |image, text, embedder| {
        let samples = eval_pool(&ds, &file.split, &labels, pool, image)?;
        let known = zero_shot_text_features(embedder, text, &labels)?;
        compute_metrics(&zero_shot_baseline(&samples, known.view(), cfg.temperature, threshold), &labels)?
    });
    let header = json!({
        "baseline": "zero_shot",
        "threshold": threshold,
        "temperature": cfg.temperature,
        "pool": pool_name(pool),
        "dataset_root": absolute(&ds.root),
        "backend": backend.describe(),
    });
    report_metrics(&report, header, pool, out.as_deref())
}

pub fn params(config: Option<PathBuf>, feature_dim: usize, token_dim: usize) -> Result<()> {
    let cfg = match config {
        Some(p) => validate_config(read_config_file(&p)?)?,
        None => TrainConfig::default(),
    };
    let h = cfg.bias_hidden;
    println!("d_v = {feature_dim}, d_t = {token_dim}, hidden = {h}");
    let mut rows: BTreeMap<usize, bool> = [4, 8, 16].into_iter().map(|m| (m, false)).collect();
    rows.insert(cfg.context_length, true);
    println!("{:>4}  {:>18}", "m", "trainable");
    for (m, configured) in rows {
        let count = count_trainable_params(m, feature_dim, token_dim, h);
        let mark = if configured { "  (configured)" } else { "" };
        println!("{m:>4}  {:>18}{mark}", format_param_count(count));
    }
    Ok(())
}

pub fn export(
    run: &Path,
    split: &Path,
    args: &BackendArgs,
    pool: PoolKind,
    dataset: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let (ckpt, l) = load_run(run, split, args, dataset)?;
    let summary = with_backend!(&l.backend, |image, text, embedder| {
        let state = restore(&ckpt, &l, image, embedder)?;
        let samples = eval_pool(&l.ds, &l.file.split, &l.labels, pool, image)?;
        export_embeddings(&state, text, &samples, &l.labels, &l.meta.config, out)?
    });
    println!(
        "exported {} text and {} image embeddings to {}",
        summary.text_rows,
        summary.image_rows,
        summary.dir.display()
    );
    Ok(())
}
