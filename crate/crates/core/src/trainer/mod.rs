//! Alternating-freeze training: a source sub-step updating `θ` and `s` with
//! `u` frozen, pseudo-labeling of the target batch, then a target sub-step
//! updating `θ` and `u` with `s` frozen.

mod checkpoint;
mod fit;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Ix1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bias_net::{BiasCache, BiasGrads, BiasNetParams};
use crate::config::TrainConfig;
use crate::data::{BatchPair, SourcePool, TargetPool};
use crate::encoders::{TextEncoder, TokenBank};
use crate::error::{Error, Result};
use crate::objective::{
    assign_pseudo_label, class_probabilities, instance_logit_grad, instance_loss, PseudoLabel, PseudoLabelDecision,
    ProbVector, Thresholds,
};
use crate::optim::{AdamState, AdamWParams, CosineSchedule};
use crate::prompts::{assemble_text_features, assemble_with_tapes, backprop_prompts, PromptState};
use crate::scalar::Scalar;
use crate::tensor::{l2_norm, Fingerprint};

pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta, TensorInfo, CHECKPOINT_DIR, CHECKPOINT_VERSION};
pub use fit::{fit, read_step_reports, FitOptions, FitOutcome, STEPS_FILE};

/// AdamW moments for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub known_context: AdamState<T, Ix2>,
    pub unknown_context: AdamState<T, Ix2>,
    pub w1: AdamState<T, Ix2>,
    pub b1: AdamState<T, Ix1>,
    pub w2: AdamState<T, Ix2>,
    pub b2: AdamState<T, Ix1>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn zeros_like(prompts: &PromptState<T>, bias: &BiasNetParams<T>) -> Self {
        OptimizerState {
            known_context: AdamState::zeros_like(&prompts.known_context),
            unknown_context: AdamState::zeros_like(&prompts.unknown_context),
            w1: AdamState::zeros_like(&bias.w1),
            b1: AdamState::zeros_like(&bias.b1),
            w2: AdamState::zeros_like(&bias.w2),
            b2: AdamState::zeros_like(&bias.b2),
        }
    }
}

/// Everything that changes during training. Encoders are not part of it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub prompts: PromptState<T>,
    pub bias: BiasNetParams<T>,
    pub optimizer: OptimizerState<T>,
    /// Completed iterations; also the schedule position.
    pub iteration: usize,
    pub seed: u64,
}

/// Fingerprints of the three trainable groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamChecksums {
    pub known_context: String,
    pub unknown_context: String,
    pub bias: String,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state. Contexts are drawn first, then the bias network, from one
    /// stream seeded with `cfg.seed`.
    pub fn init(cfg: &TrainConfig, token_bank: TokenBank<T>, feature_dim: usize) -> Result<Self> {
        cfg.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let token_dim = token_bank.token_dim();
        let prompts = PromptState::init(cfg.context_length, token_bank, cfg.context_init, cfg.separate_prompts, &mut rng)?;
        let bias = BiasNetParams::init(feature_dim, cfg.bias_hidden, token_dim, &mut rng);
        let optimizer = OptimizerState::zeros_like(&prompts, &bias);
        Ok(TrainState {
            prompts,
            bias,
            optimizer,
            iteration: 0,
            seed: cfg.seed,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.bias.feature_dim()
    }

    pub fn checksums(&self) -> ParamChecksums {
        ParamChecksums {
            known_context: Fingerprint::new().array(&self.prompts.known_context).hex(),
            unknown_context: Fingerprint::new().array(&self.prompts.unknown_context).hex(),
            bias: Fingerprint::new()
                .array(&self.bias.w1)
                .array(&self.bias.b1)
                .array(&self.bias.w2)
                .array(&self.bias.b2)
                .hex(),
        }
    }
}

/// Checks that the encoder fits the state before any step runs.
pub fn check_compatible<T: Scalar, E: TextEncoder<T>>(state: &TrainState<T>, text: &E) -> Result<()> {
    if text.token_dim() != state.prompts.token_dim() {
        return Err(Error::Dimension {
            context: "text encoder token width".into(),
            expected: state.prompts.token_dim(),
            found: text.token_dim(),
        });
    }
    if text.output_dim() != state.feature_dim() {
        return Err(Error::Dimension {
            context: "text encoder output vs image feature".into(),
            expected: state.feature_dim(),
            found: text.output_dim(),
        });
    }
    state
        .prompts
        .token_bank
        .check_fits(state.prompts.context_length(), text.max_sequence_length())
}

fn bias_token<T: Scalar>(
    state: &TrainState<T>,
    v: ArrayView1<T>,
    use_bias_net: bool,
) -> Result<(Array1<T>, Option<BiasCache<T>>)> {
    if use_bias_net {
        let (beta, cache) = state.bias.forward(v)?;
        Ok((beta, Some(cache)))
    } else {
        Ok((Array1::zeros(state.prompts.token_dim()), None))
    }
}

/// Text features `W` for image feature `v`, one row per output slot.
pub fn text_features_for<T: Scalar, E: TextEncoder<T>>(
    state: &TrainState<T>,
    text: &E,
    v: ArrayView1<T>,
    cfg: &TrainConfig,
) -> Result<Array2<T>> {
    let (beta, _) = bias_token(state, v, cfg.use_bias_net)?;
    assemble_text_features(&state.prompts, beta.view(), text)
}

/// Class probabilities for one image feature under the current parameters.
pub fn image_probabilities<T: Scalar, E: TextEncoder<T>>(
    state: &TrainState<T>,
    text: &E,
    v: ArrayView1<T>,
    cfg: &TrainConfig,
) -> Result<ProbVector<T>> {
    let w = text_features_for(state, text, v, cfg)?;
    class_probabilities(v, w.view(), T::lit(cfg.temperature))
}

/// Probabilities for every row of `features`, in row order.
pub fn batch_probabilities<T: Scalar, E: TextEncoder<T> + Sync>(
    state: &TrainState<T>,
    text: &E,
    features: ArrayView2<T>,
    cfg: &TrainConfig,
) -> Result<Vec<ProbVector<T>>> {
    (0..features.nrows())
        .into_par_iter()
        .map(|i| image_probabilities(state, text, features.row(i), cfg))
        .collect()
}

/// Gradients of a batch loss with respect to every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub known_context: Array2<T>,
    pub unknown_context: Array2<T>,
    pub bias: BiasGrads<T>,
}

impl<T: Scalar> Gradients<T> {
    fn zeros(state: &TrainState<T>) -> Self {
        Gradients {
            known_context: Array2::zeros(state.prompts.known_context.dim()),
            unknown_context: Array2::zeros(state.prompts.unknown_context.dim()),
            bias: BiasGrads::zeros_like(&state.bias),
        }
    }

    fn add_assign(&mut self, other: &Gradients<T>) {
        self.known_context += &other.known_context;
        self.unknown_context += &other.unknown_context;
        self.bias.add_assign(&other.bias);
    }

    fn all_finite(&self) -> bool {
        let b = &self.bias;
        self.known_context.iter().all(|x| x.is_finite())
            && self.unknown_context.iter().all(|x| x.is_finite())
            && b.w1.iter().chain(b.w2.iter()).chain(b.b1.iter()).chain(b.b2.iter()).all(|x| x.is_finite())
    }
}

/// Mean `-log p_y + λ·H(p)` over the labeled rows and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchObjective<T> {
    pub loss: T,
    pub retained: usize,
    pub grads: Gradients<T>,
}

fn image_objective<T: Scalar, E: TextEncoder<T>>(
    state: &TrainState<T>,
    text: &E,
    v: ArrayView1<T>,
    label: usize,
    weight: T,
    cfg: &TrainConfig,
) -> Result<(T, Gradients<T>)> {
    let eta = T::lit(cfg.temperature);
    let lambda = T::lit(cfg.entropy_weight);
    let (beta, cache) = bias_token(state, v, cfg.use_bias_net)?;
    let (w, tapes) = assemble_with_tapes(&state.prompts, beta.view(), text)?;
    let p = class_probabilities(v, w.view(), eta)?;
    if label >= p.len() {
        return Err(crate::error::validation(format!("label {label} is outside {} output slots", p.len())));
    }
    let loss = instance_loss(p.probs.view(), label, lambda);
    let grad_sim = instance_logit_grad(p.probs.view(), label, lambda, weight).mapv(|g| g / eta);
    let grad_rows = Array2::from_shape_fn((grad_sim.len(), v.len()), |(r, k)| grad_sim[r] * v[k]);
    let pg = backprop_prompts(&state.prompts, text, &tapes, grad_rows.view());
    let bias = match cache {
        Some(cache) => state.bias.backward(v, &cache, pg.beta.view()).0,
        None => BiasGrads::zeros_like(&state.bias),
    };
    Ok((
        loss,
        Gradients {
            known_context: pg.known_context,
            unknown_context: pg.unknown_context,
            bias,
        },
    ))
}

/// Loss and gradients over `rows` of `features` with per-row labels; `None`
/// rows are excluded and the mean runs over the rest. All-`None` gives a zero
/// loss with zero gradients.
pub fn batch_objective<T: Scalar, E: TextEncoder<T> + Sync>(
    state: &TrainState<T>,
    text: &E,
    features: ArrayView2<T>,
    rows: &[usize],
    labels: &[Option<usize>],
    cfg: &TrainConfig,
) -> Result<BatchObjective<T>> {
    if rows.len() != labels.len() {
        return Err(crate::error::validation("batch rows and labels differ in length"));
    }
    let kept: Vec<(usize, usize)> = rows
        .iter()
        .zip(labels)
        .filter_map(|(&r, l)| l.map(|y| (r, y)))
        .collect();
    let mut grads = Gradients::zeros(state);
    if kept.is_empty() {
        return Ok(BatchObjective {
            loss: T::zero(),
            retained: 0,
            grads,
        });
    }
    let n = T::from_usize(kept.len()).unwrap();
    let weight = T::one() / n;
    let per_image = kept
        .par_iter()
        .map(|&(r, y)| image_objective(state, text, features.row(r), y, weight, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut total = T::zero();
    for (loss, g) in &per_image {
        total += *loss;
        grads.add_assign(g);
    }
    Ok(BatchObjective {
        loss: total / n,
        retained: kept.len(),
        grads,
    })
}

/// Which sub-step an update belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Updates `θ` and `s`; `u` frozen.
    Source,
    /// Updates `θ` and `u`; `s` frozen.
    Target,
}

fn adam_params(cfg: &TrainConfig) -> AdamWParams {
    AdamWParams {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    }
}

/// Applies one AdamW update to the tensors `phase` trains. Frozen tensors and
/// their moments are left untouched.
pub fn apply_update<T: Scalar>(state: &mut TrainState<T>, grads: &Gradients<T>, phase: Phase, cfg: &TrainConfig, lr: f64) {
    let hp = adam_params(cfg);
    let opt = &mut state.optimizer;
    match phase {
        Phase::Source => opt
            .known_context
            .update(&mut state.prompts.known_context, &grads.known_context, lr, hp),
        Phase::Target => {
            if !state.prompts.shared {
                opt.unknown_context
                    .update(&mut state.prompts.unknown_context, &grads.unknown_context, lr, hp);
            }
        }
    }
    if cfg.use_bias_net {
        let b = &mut state.bias;
        opt.w1.update(&mut b.w1, &grads.bias.w1, lr, hp);
        opt.b1.update(&mut b.b1, &grads.bias.b1, lr, hp);
        opt.w2.update(&mut b.w2, &grads.bias.w2, lr, hp);
        opt.b2.update(&mut b.b2, &grads.bias.b2, lr, hp);
    }
}

fn non_finite<T: Scalar>(state: &TrainState<T>, what: &str, loss: T, lr: f64) -> Error {
    let norm = |a: &Array2<T>| a.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    Error::NonFinite {
        iteration: state.iteration,
        detail: format!(
            "{what}={loss}, lr={lr:e}, |s|={:.6e}, |u|={:.6e}, |W1|={:.6e}, |W2|={:.6e}, |b2|={:.6e}",
            norm(&state.prompts.known_context),
            norm(&state.prompts.unknown_context),
            norm(&state.bias.w1),
            norm(&state.bias.w2),
            l2_norm(state.bias.b2.view()).as_f64(),
        ),
    }
}

/// Sub-step (a): source loss on `rows`, then update `θ` and `s`.
pub fn source_substep<T: Scalar, E: TextEncoder<T> + Sync>(
    state: &mut TrainState<T>,
    text: &E,
    source: &SourcePool<T>,
    rows: &[usize],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<T> {
    let labels: Vec<Option<usize>> = rows.iter().map(|&r| Some(source.labels[r])).collect();
    let obj = batch_objective(state, text, source.features.view(), rows, &labels, cfg)?;
    if !obj.loss.is_finite() || !obj.grads.all_finite() {
        return Err(non_finite(state, "L_source", obj.loss, lr));
    }
    apply_update(state, &obj.grads, Phase::Source, cfg, lr);
    Ok(obj.loss)
}

pub fn thresholds(cfg: &TrainConfig) -> Thresholds {
    Thresholds {
        kappa_lower: cfg.kappa_lower,
        kappa_upper: cfg.kappa_upper,
        kappa_known: cfg.kappa_known,
    }
}

/// Sub-step (b): pseudo-labels for target `rows` under the current parameters.
pub fn pseudo_label_batch<T: Scalar, E: TextEncoder<T> + Sync>(
    state: &TrainState<T>,
    text: &E,
    target: &TargetPool<T>,
    rows: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<PseudoLabelDecision<T>>> {
    let th = thresholds(cfg);
    rows.par_iter()
        .map(|&r| image_probabilities(state, text, target.features.row(r), cfg).map(|p| assign_pseudo_label(&p, th)))
        .collect()
}

/// Sub-step (c): target loss against `decisions`, then update `θ` and `u`.
/// Skipped when every instance was discarded.
pub fn target_substep<T: Scalar, E: TextEncoder<T> + Sync>(
    state: &mut TrainState<T>,
    text: &E,
    target: &TargetPool<T>,
    rows: &[usize],
    decisions: &[PseudoLabelDecision<T>],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(T, usize)> {
    let unk = state.prompts.num_rows() - 1;
    let labels: Vec<Option<usize>> = decisions.iter().map(|d| d.label(unk)).collect();
    let obj = batch_objective(state, text, target.features.view(), rows, &labels, cfg)?;
    if obj.retained == 0 {
        return Ok((T::zero(), 0));
    }
    if !obj.loss.is_finite() || !obj.grads.all_finite() {
        return Err(non_finite(state, "L_target", obj.loss, lr));
    }
    apply_update(state, &obj.grads, Phase::Target, cfg, lr);
    Ok((obj.loss, obj.retained))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoCounts {
    pub known: usize,
    pub unknown: usize,
    pub discarded: usize,
}

impl PseudoCounts {
    pub fn tally<T>(decisions: &[PseudoLabelDecision<T>]) -> Self {
        let mut c = PseudoCounts::default();
        for d in decisions {
            match d.outcome {
                PseudoLabel::Known(_) => c.known += 1,
                PseudoLabel::Unknown => c.unknown += 1,
                PseudoLabel::Discard => c.discarded += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.known + self.unknown + self.discarded
    }
}

/// One line of the step-report stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Zero-based index of the iteration this report describes.
    pub iteration: usize,
    pub l_source: f64,
    pub l_target: f64,
    pub counts: PseudoCounts,
    pub lr: f64,
}

/// One full iteration on `batch`, advancing `state.iteration` by one.
pub fn train_step<T: Scalar, E: TextEncoder<T> + Sync>(
    state: &mut TrainState<T>,
    text: &E,
    source: &SourcePool<T>,
    target: &TargetPool<T>,
    batch: &BatchPair,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let lr = CosineSchedule::new(cfg.learning_rate, cfg.total_iterations).lr(state.iteration);
    let l_source = source_substep(state, text, source, &batch.source, cfg, lr)?;
    let decisions = pseudo_label_batch(state, text, target, &batch.target, cfg)?;
    let counts = PseudoCounts::tally(&decisions);
    let (l_target, _) = target_substep(state, text, target, &batch.target, &decisions, cfg, lr)?;
    let report = StepReport {
        iteration: state.iteration,
        l_source: l_source.as_f64(),
        l_target: l_target.as_f64(),
        counts,
        lr,
    };
    state.iteration += 1;
    Ok(report)
}
