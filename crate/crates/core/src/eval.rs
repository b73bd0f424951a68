//! Inference, open-set metrics, the zero-shot threshold baseline and embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{ExampleRecord, FeatureCacheWriter, FeatureSource};
use crate::encoders::{ImageEncoder, PhraseEmbedder, TextEncoder};
use crate::error::{validation, Result};
use crate::label::{LabelSpace, SplitSpec};
use crate::objective::{argmax, logits, softmax};
use crate::prompts::{assemble_text_features, stack_rows};
use crate::scalar::Scalar;
use crate::trainer::{batch_probabilities, TrainState};

/// Default zero-shot rejection threshold.
pub const BASELINE_THRESHOLD: f64 = 0.5;

/// Argmax over every output slot, lowest index on ties.
pub fn predict<T: Scalar>(v: ArrayView1<T>, text_features: ArrayView2<T>, temperature: T) -> usize {
    argmax(softmax(logits(v, text_features, temperature).view()).view()).0
}

/// Predictions next to ground truth. Unknown ground truth is `unknown_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
    pub domains: Vec<String>,
    pub unknown_index: usize,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.predicted.len() != self.truth.len() || self.domains.len() != self.truth.len() {
            return Err(validation("prediction, truth and domain lists differ in length"));
        }
        if self.is_empty() {
            return Err(validation("no samples to evaluate"));
        }
        if let Some(bad) = self.predicted.iter().chain(&self.truth).find(|&&i| i > self.unknown_index) {
            return Err(validation(format!("index {bad} is outside the label space")));
        }
        Ok(())
    }
}

/// Harmonic mean of known and unknown accuracy; 0 when both are 0.
pub fn hos(os_star: f64, unk: f64) -> f64 {
    if os_star + unk == 0.0 {
        0.0
    } else {
        2.0 * os_star * unk / (os_star + unk)
    }
}

/// Open-set metrics for one group of samples, in percent. A metric is `None`
/// when its defining samples are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub known_samples: usize,
    pub unknown_samples: usize,
    #[serde(rename = "os_star")]
    pub os_star: Option<f64>,
    pub unk: Option<f64>,
    pub hos: Option<f64>,
    pub os: Option<f64>,
    /// Accuracy per known class, `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
}

fn metrics_of(pred: &[usize], truth: &[usize], unknown_index: usize) -> Metrics {
    let mut hits = vec![0usize; unknown_index + 1];
    let mut totals = vec![0usize; unknown_index + 1];
    for (&p, &t) in pred.iter().zip(truth) {
        totals[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..unknown_index)
        .map(|c| (totals[c] > 0).then(|| 100.0 * hits[c] as f64 / totals[c] as f64))
        .collect();
    let evaluated: Vec<f64> = per_class.iter().flatten().copied().collect();
    let os_star = (!evaluated.is_empty()).then(|| evaluated.iter().sum::<f64>() / evaluated.len() as f64);
    let unknown_samples = totals[unknown_index];
    let unk = (unknown_samples > 0).then(|| 100.0 * hits[unknown_index] as f64 / unknown_samples as f64);
    let (hos_v, os) = match (os_star, unk) {
        (Some(a), Some(b)) => {
            let k = evaluated.len() as f64;
            (Some(hos(a, b)), Some((k * a + b) / (k + 1.0)))
        }
        _ => (None, None),
    };
    Metrics {
        samples: truth.len(),
        known_samples: truth.len() - unknown_samples,
        unknown_samples,
        os_star,
        unk,
        hos: hos_v,
        os,
        per_class,
    }
}

/// Blended metrics plus one section per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub blended: Metrics,
    pub per_domain: BTreeMap<String, Metrics>,
}

pub fn compute_metrics(preds: &PredictionSet, labels: &LabelSpace) -> Result<MetricsReport> {
    preds.check()?;
    if preds.unknown_index != labels.unknown_index() {
        return Err(validation("prediction set and label space disagree on the unknown index"));
    }
    let blended = metrics_of(&preds.predicted, &preds.truth, preds.unknown_index);
    let mut groups: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for i in 0..preds.len() {
        let g = groups.entry(preds.domains[i].as_str()).or_default();
        g.0.push(preds.predicted[i]);
        g.1.push(preds.truth[i]);
    }
    let per_domain = groups
        .into_iter()
        .map(|(d, (p, t))| (d.to_string(), metrics_of(&p, &t, preds.unknown_index)))
        .collect();
    Ok(MetricsReport {
        class_names: labels.known_classes().to_vec(),
        blended,
        per_domain,
    })
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn metrics_json(m: &Metrics) -> serde_json::Value {
    let pct = |x: Option<f64>| x.map(round2).map_or(serde_json::Value::String("n/a".into()), serde_json::Value::from);
    let mut obj = serde_json::Map::new();
    obj.insert("samples".into(), m.samples.into());
    obj.insert("known_samples".into(), m.known_samples.into());
    obj.insert("unknown_samples".into(), m.unknown_samples.into());
    obj.insert("os_star".into(), pct(m.os_star));
    obj.insert("unk".into(), pct(m.unk));
    if m.hos.is_some() {
        obj.insert("hos".into(), pct(m.hos));
        obj.insert("os".into(), pct(m.os));
    }
    serde_json::Value::Object(obj)
}

impl MetricsReport {
    /// Structured document with two-decimal percentages. Undefined metrics
    /// print as `"n/a"`; HOS and OS are omitted when UNK is undefined.
    pub fn to_json(&self) -> serde_json::Value {
        let per_domain: serde_json::Map<String, serde_json::Value> =
            self.per_domain.iter().map(|(d, m)| (d.clone(), metrics_json(m))).collect();
        serde_json::json!({
            "blended": metrics_json(&self.blended),
            "per_domain": per_domain,
        })
    }

    /// Plain-text table with OS*, UNK, HOS and OS columns.
    pub fn render_table(&self) -> String {
        let cell = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        let mut rows: Vec<(&str, &Metrics)> = self.per_domain.iter().map(|(d, m)| (d.as_str(), m)).collect();
        rows.push(("blended", &self.blended));
        let width = rows.iter().map(|(d, _)| d.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>7}", "domain", "OS*", "UNK", "HOS", "OS", "n");
        for (d, m) in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>7}",
                d,
                cell(m.os_star),
                cell(m.unk),
                cell(m.hos),
                cell(m.os),
                m.samples
            );
        }
        out
    }
}

/// Encoded evaluation samples with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPool<T> {
    pub features: Array2<T>,
    pub truth: Vec<usize>,
    pub domains: Vec<String>,
}

impl<T> EvalPool<T> {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

/// Records of `domains` whose class belongs to the split, with truth mapped
/// into `labels` (unknown classes to the unknown slot).
pub fn encode_eval_pool<T: Scalar, I: ImageEncoder<T> + ?Sized>(
    records: &[ExampleRecord],
    split: &SplitSpec,
    labels: &LabelSpace,
    domains: &[String],
    source: &FeatureSource,
    encoder: &I,
) -> Result<EvalPool<T>> {
    let chosen: Vec<(&ExampleRecord, usize)> = records
        .iter()
        .filter(|r| domains.contains(&r.domain_tag))
        .filter_map(|r| {
            let c = r.class_name.as_deref()?;
            split.is_target_class(c).then(|| (r, labels.target_index(c)))
        })
        .collect();
    if chosen.is_empty() {
        return Err(validation(format!("no evaluation records in domains {domains:?}")));
    }
    let rows = chosen
        .par_iter()
        .map(|(r, _)| source.feature(&r.item_ref, encoder))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalPool {
        features: stack_rows(&rows),
        truth: chosen.iter().map(|(_, y)| *y).collect(),
        domains: chosen.iter().map(|(r, _)| r.domain_tag.clone()).collect(),
    })
}

/// Predictions of a trained state on `pool`.
pub fn evaluate<T: Scalar, E: TextEncoder<T> + Sync>(
    state: &TrainState<T>,
    text: &E,
    pool: &EvalPool<T>,
    cfg: &TrainConfig,
) -> Result<PredictionSet> {
    let probs = batch_probabilities(state, text, pool.features.view(), cfg)?;
    Ok(PredictionSet {
        predicted: probs.iter().map(|p| p.argmax()).collect(),
        truth: pool.truth.clone(),
        domains: pool.domains.clone(),
        unknown_index: state.prompts.num_rows() - 1,
    })
}

/// Fixed template for zero-shot class prompts.
pub fn zero_shot_prompt(class_name: &str) -> String {
    format!("a {}", crate::encoders::class_phrase(class_name))
}

/// `|C_k|` text features from the fixed per-class templates.
pub fn zero_shot_text_features<T: Scalar, P: PhraseEmbedder<T> + ?Sized, E: TextEncoder<T>>(
    embedder: &P,
    text: &E,
    labels: &LabelSpace,
) -> Result<Array2<T>> {
    let rows = labels
        .known_classes()
        .iter()
        .map(|c| {
            let tokens = embedder.embed_phrase(&zero_shot_prompt(c))?;
            text.encode(tokens.view())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_rows(&rows))
}

/// Argmax over known classes, replaced by the unknown slot when the winning
/// probability is below `threshold`.
pub fn zero_shot_predict<T: Scalar>(v: ArrayView1<T>, known_features: ArrayView2<T>, temperature: T, threshold: f64) -> usize {
    let p = softmax(logits(v, known_features, temperature).view());
    let (best, best_p) = argmax(p.view());
    if best_p < T::lit(threshold) {
        known_features.nrows()
    } else {
        best
    }
}

pub fn zero_shot_baseline<T: Scalar>(
    pool: &EvalPool<T>,
    known_features: ArrayView2<T>,
    temperature: f64,
    threshold: f64,
) -> PredictionSet {
    let eta = T::lit(temperature);
    PredictionSet {
        predicted: pool
            .features
            .rows()
            .into_iter()
            .map(|v| zero_shot_predict(v, known_features, eta, threshold))
            .collect(),
        truth: pool.truth.clone(),
        domains: pool.domains.clone(),
        unknown_index: known_features.nrows(),
    }
}

/// What [`export_embeddings`] wrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub dir: PathBuf,
    pub text_rows: usize,
    pub image_rows: usize,
}

/// Mean bias token over `pool`; zero when the bias network is disabled.
fn pool_bias<T: Scalar>(state: &TrainState<T>, pool: &EvalPool<T>, cfg: &TrainConfig) -> Result<Array1<T>> {
    let d = state.prompts.token_dim();
    if !cfg.use_bias_net || pool.is_empty() {
        return Ok(Array1::zeros(d));
    }
    let betas = pool
        .features
        .rows()
        .into_iter()
        .map(|v| state.bias.forward(v).map(|(b, _)| b))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_rows(&betas).mean_axis(Axis(0)).expect("non-empty"))
}

/// Writes the `|C_k|+1` text features and every image feature of `pool` in
/// the feature-cache format, tagged with ground truth. Text features use the
/// pool's mean bias token.
pub fn export_embeddings<T: Scalar, E: TextEncoder<T>>(
    state: &TrainState<T>,
    text: &E,
    pool: &EvalPool<T>,
    labels: &LabelSpace,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<ExportSummary> {
    let beta = pool_bias(state, pool, cfg)?;
    let w = assemble_text_features(&state.prompts, beta.view(), text)?;
    let mut writer = FeatureCacheWriter::new(out);
    for (i, row) in w.rows().into_iter().enumerate() {
        let row = row.to_owned();
        let name = if i == labels.unknown_index() { "unknown" } else { labels.class_name(i) };
        writer.push(format!("text/{i:04}"), Some(format!("text:{name}")), row.as_slice().expect("contiguous"));
    }
    for (i, v) in pool.features.rows().into_iter().enumerate() {
        let v = v.to_owned();
        let tag = format!("image:{}:{}", pool.domains[i], labels.class_name(pool.truth[i]));
        writer.push(format!("image/{i:06}"), Some(tag), v.as_slice().expect("contiguous"));
    }
    let dir = writer.finish()?;
    Ok(ExportSummary {
        dir,
        text_rows: w.nrows(),
        image_rows: pool.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn labels(n: usize) -> LabelSpace {
        crate::label::build_label_space((0..n).map(|i| format!("c{i}"))).unwrap()
    }

    #[test]
    fn published_pairs() {
        assert!((hos(90.64, 94.36) - 92.46).abs() < 0.01);
        assert!((hos(87.05, 89.82) - 88.41).abs() < 0.01);
        assert!((hos(79.33, 79.03) - 79.18).abs() < 0.01);
        assert_eq!(hos(100.0, 0.0), 0.0);
        assert_eq!(hos(0.0, 0.0), 0.0);
    }

    proptest! {
        #[test]
        fn hos_symmetric_and_bounded(a in 0.0f64..100.0, b in 0.0f64..100.0) {
            prop_assert!((hos(a, b) - hos(b, a)).abs() < 1e-12);
            prop_assert!(hos(a, b) <= 2.0 * a.min(b) + 1e-12);
            prop_assert!(hos(a, b) <= a.max(b) + 1e-12);
        }

        #[test]
        fn equal_inputs_are_fixed_points(x in 0.0f64..100.0) {
            prop_assert!((hos(x, x) - x).abs() < 1e-10);
        }

        #[test]
        fn eta_rescaling_keeps_the_prediction(seed in 0u64..500, scale in 0.1f64..10.0) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w: Array2<f64> = crate::tensor::gaussian((5, 4), 1.0, &mut rng);
            let v: Array1<f64> = crate::tensor::gaussian(4, 1.0, &mut rng);
            prop_assert_eq!(predict(v.view(), w.view(), 0.01), predict(v.view(), w.view(), 0.01 * scale));
        }
    }

    #[test]
    fn hand_built_confusion_matches_tally() {
        // classes 0,1,2 known, 3 unknown
        let set = PredictionSet {
            predicted: vec![0, 0, 1, 2, 1, 3, 3, 0, 3, 2],
            truth: vec![0, 0, 1, 1, 1, 2, 3, 3, 3, 3],
            domains: vec!["a".into(); 10],
            unknown_index: 3,
        };
        let r = compute_metrics(&set, &labels(3)).unwrap();
        let m = &r.blended;
        assert_eq!(m.per_class, vec![Some(100.0), Some(200.0 / 3.0), Some(0.0)]);
        let os_star = (100.0 + 200.0 / 3.0 + 0.0) / 3.0;
        assert!((m.os_star.unwrap() - os_star).abs() < 1e-12);
        assert!((m.unk.unwrap() - 50.0).abs() < 1e-12);
        assert!((m.os.unwrap() - (3.0 * os_star + 50.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let set = PredictionSet {
            predicted: vec![0, 0, 2],
            truth: vec![0, 0, 2],
            domains: vec!["a".into(); 3],
            unknown_index: 2,
        };
        let r = compute_metrics(&set, &labels(2)).unwrap();
        assert_eq!(r.blended.per_class, vec![Some(100.0), None]);
        assert_eq!(r.blended.os_star, Some(100.0));
    }

    #[test]
    fn source_only_pool_has_no_unk() {
        let set = PredictionSet {
            predicted: vec![0, 1],
            truth: vec![0, 1],
            domains: vec!["src".into(); 2],
            unknown_index: 2,
        };
        let r = compute_metrics(&set, &labels(2)).unwrap();
        assert_eq!(r.blended.unk, None);
        assert_eq!(r.blended.hos, None);
        let doc = r.to_json();
        assert_eq!(doc["blended"]["unk"], "n/a");
        assert!(doc["blended"].get("hos").is_none());
        assert!(r.render_table().contains("n/a"));
    }

    #[test]
    fn per_domain_unk_aggregates_to_blended() {
        let set = PredictionSet {
            predicted: vec![2, 0, 2, 2, 1, 0, 2],
            truth: vec![2, 2, 2, 2, 1, 2, 0],
            domains: ["a", "a", "a", "b", "b", "b", "b"].iter().map(|s| s.to_string()).collect(),
            unknown_index: 2,
        };
        let r = compute_metrics(&set, &labels(2)).unwrap();
        let weighted: f64 = r
            .per_domain
            .values()
            .map(|m| m.unk.unwrap() * m.unknown_samples as f64)
            .sum::<f64>()
            / r.blended.unknown_samples as f64;
        assert!((weighted - r.blended.unk.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn empty_set_is_an_error() {
        let set = PredictionSet {
            predicted: vec![],
            truth: vec![],
            domains: vec![],
            unknown_index: 2,
        };
        assert!(compute_metrics(&set, &labels(2)).is_err());
    }

    #[test]
    fn two_decimal_document() {
        let set = PredictionSet {
            predicted: vec![0, 1, 2],
            truth: vec![0, 0, 2],
            domains: vec!["a".into(); 3],
            unknown_index: 2,
        };
        let r = compute_metrics(&set, &labels(2)).unwrap();
        assert_eq!(r.to_json()["blended"]["hos"], 66.67);
    }

    #[test]
    fn baseline_threshold_edges() {
        let w = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let v = array![0.8, 0.6];
        assert_ne!(zero_shot_predict(v.view(), w.view(), 0.01, 0.0), 3);
        assert_eq!(zero_shot_predict(v.view(), w.view(), 1.0, 1.0), 3);
        let uniform = Array2::from_elem((10, 2), std::f64::consts::FRAC_1_SQRT_2);
        assert_eq!(zero_shot_predict(v.view(), uniform.view(), 0.01, 0.2), 10);
    }

    #[test]
    fn predict_prefers_unknown_when_it_wins() {
        let w = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        assert_eq!(predict(array![0.6, 0.8].view(), w.view(), 0.01), 2);
    }
}
