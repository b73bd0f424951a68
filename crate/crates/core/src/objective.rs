//! Probability head, entropy-regularized losses and threshold pseudo-labels.

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::error::{validation, Result};
use crate::scalar::Scalar;
use crate::tensor::l2_norm;

/// Tolerance on the unit-norm precondition of similarity inputs.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Softmax output over `|C_k|` known slots followed by the unknown slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<T> {
    pub probs: Array1<T>,
    pub temperature: T,
}

impl<T: Scalar> ProbVector<T> {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn unknown_index(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn unknown_prob(&self) -> T {
        self.probs[self.unknown_index()]
    }

    /// Highest known-slot probability and its index (lowest index on ties).
    pub fn best_known(&self) -> (usize, T) {
        argmax(self.probs.slice(ndarray::s![..self.unknown_index()]))
    }

    /// Argmax over all slots, ties to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(self.probs.view()).0
    }
}

pub(crate) fn argmax<T: Scalar>(xs: ArrayView1<T>) -> (usize, T) {
    let mut best = (0, xs[0]);
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Numerically stable softmax of `logits`.
pub fn softmax<T: Scalar>(logits: ArrayView1<T>) -> Array1<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps = logits.mapv(|z| (z - max).exp());
    let total: T = exps.iter().copied().sum();
    exps.mapv(|e| e / total)
}

/// Temperature-scaled cosine logits `W·v / η`.
pub fn logits<T: Scalar>(v: ArrayView1<T>, text_features: ArrayView2<T>, temperature: T) -> Array1<T> {
    text_features.dot(&v).mapv(|s| s / temperature)
}

/// `p(y_c | x)` for every output slot.
pub fn class_probabilities<T: Scalar>(
    v: ArrayView1<T>,
    text_features: ArrayView2<T>,
    temperature: T,
) -> Result<ProbVector<T>> {
    if temperature.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(validation("temperature must be positive"));
    }
    if text_features.ncols() != v.len() {
        return Err(crate::Error::Dimension {
            context: "text features vs image feature".into(),
            expected: v.len(),
            found: text_features.ncols(),
        });
    }
    let tol = T::lit(NORM_TOLERANCE);
    if (l2_norm(v) - T::one()).abs() > tol {
        return Err(validation("image feature is not unit-norm"));
    }
    for (i, row) in text_features.rows().into_iter().enumerate() {
        if (l2_norm(row) - T::one()).abs() > tol {
            return Err(validation(format!("text feature row {i} is not unit-norm")));
        }
    }
    Ok(ProbVector {
        probs: softmax(logits(v, text_features, temperature).view()),
        temperature,
    })
}

/// Shannon entropy with `0·log 0 = 0`.
pub fn entropy<T: Scalar>(p: &ProbVector<T>) -> T {
    entropy_of(p.probs.view())
}

pub(crate) fn entropy_of<T: Scalar>(p: ArrayView1<T>) -> T {
    -p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| x * x.ln())
        .sum::<T>()
}

/// `-log p_label + λ·H(p)` for one instance.
pub fn instance_loss<T: Scalar>(p: ArrayView1<T>, label: usize, entropy_weight: T) -> T {
    -p[label].ln() + entropy_weight * entropy_of(p)
}

/// Gradient of [`instance_loss`] with respect to the logits, scaled by `weight`.
///
/// Cross-entropy contributes `p - e_y`; the entropy term `-p ⊙ (log p + H)`.
pub fn instance_logit_grad<T: Scalar>(p: ArrayView1<T>, label: usize, entropy_weight: T, weight: T) -> Array1<T> {
    let h = entropy_of(p);
    let mut g = Array1::zeros(p.len());
    for (k, &pk) in p.iter().enumerate() {
        let ce = if k == label { pk - T::one() } else { pk };
        let ent = if pk > T::zero() { -pk * (pk.ln() + h) } else { T::zero() };
        g[k] = weight * (ce + entropy_weight * ent);
    }
    g
}

/// Mean cross-entropy plus `λ`-weighted mean entropy over a labeled batch.
pub fn source_loss<T: Scalar>(probs: &[ProbVector<T>], labels: &[usize], entropy_weight: T) -> Result<T> {
    if probs.len() != labels.len() {
        return Err(validation("probabilities and labels differ in length"));
    }
    if probs.is_empty() {
        return Err(validation("source batch is empty"));
    }
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.unknown_index() {
            return Err(validation(format!(
                "source label {y} is not a known class (unknown slot is {})",
                p.unknown_index()
            )));
        }
    }
    let n = T::from_usize(probs.len()).unwrap();
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| instance_loss(p.probs.view(), y, entropy_weight))
        .sum::<T>()
        / n)
}

/// Pseudo-label outcome for one unlabeled instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabel {
    Known(usize),
    Unknown,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelDecision<T> {
    pub outcome: PseudoLabel,
    /// Probability the decision rests on.
    pub confidence: T,
}

impl<T> PseudoLabelDecision<T> {
    /// Output slot used as the target-loss label, `None` when discarded.
    pub fn label(&self, unknown_index: usize) -> Option<usize> {
        match self.outcome {
            PseudoLabel::Known(c) => Some(c),
            PseudoLabel::Unknown => Some(unknown_index),
            PseudoLabel::Discard => None,
        }
    }
}

/// Confidence thresholds for pseudo-labeling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub kappa_lower: f64,
    pub kappa_upper: f64,
    pub kappa_known: f64,
}

/// Unknown if every known probability is below `κ_lower` or the unknown slot
/// reaches `κ_upper`; otherwise the best known class if it reaches `κ_known`;
/// otherwise discarded.
pub fn assign_pseudo_label<T: Scalar>(p: &ProbVector<T>, th: Thresholds) -> PseudoLabelDecision<T> {
    let (best, best_p) = p.best_known();
    let unk = p.unknown_prob();
    if best_p < T::lit(th.kappa_lower) {
        return PseudoLabelDecision {
            outcome: PseudoLabel::Unknown,
            confidence: unk,
        };
    }
    if unk >= T::lit(th.kappa_upper) {
        return PseudoLabelDecision {
            outcome: PseudoLabel::Unknown,
            confidence: unk,
        };
    }
    if best_p >= T::lit(th.kappa_known) {
        return PseudoLabelDecision {
            outcome: PseudoLabel::Known(best),
            confidence: best_p,
        };
    }
    PseudoLabelDecision {
        outcome: PseudoLabel::Discard,
        confidence: best_p.max(unk),
    }
}

pub fn assign_pseudo_labels<T: Scalar>(probs: &[ProbVector<T>], th: Thresholds) -> Vec<PseudoLabelDecision<T>> {
    probs.iter().map(|p| assign_pseudo_label(p, th)).collect()
}

/// Target loss and how many instances it was averaged over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetLoss<T> {
    pub value: T,
    pub retained: usize,
}

impl<T> TargetLoss<T> {
    /// True when every instance was discarded and the loss is the defined zero.
    pub fn all_discarded(&self) -> bool {
        self.retained == 0
    }
}

/// Mean cross-entropy against pseudo-labels plus `λ`-weighted mean entropy,
/// both over retained instances only (`None` labels are discarded).
pub fn target_loss<T: Scalar>(probs: &[ProbVector<T>], labels: &[Option<usize>], entropy_weight: T) -> Result<TargetLoss<T>> {
    if probs.len() != labels.len() {
        return Err(validation("probabilities and pseudo-labels differ in length"));
    }
    let retained: Vec<(&ProbVector<T>, usize)> = probs
        .iter()
        .zip(labels)
        .filter_map(|(p, l)| l.map(|y| (p, y)))
        .collect();
    if retained.is_empty() {
        return Ok(TargetLoss {
            value: T::zero(),
            retained: 0,
        });
    }
    let n = T::from_usize(retained.len()).unwrap();
    let value = retained
        .iter()
        .map(|(p, y)| instance_loss(p.probs.view(), *y, entropy_weight))
        .sum::<T>()
        / n;
    Ok(TargetLoss {
        value,
        retained: retained.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn pv(xs: &[f64]) -> ProbVector<f64> {
        ProbVector {
            probs: Array1::from(xs.to_vec()),
            temperature: 0.01,
        }
    }

    fn unit_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut w: Array2<f64> = crate::tensor::gaussian((n, d), 1.0, &mut rng);
        for mut r in w.rows_mut() {
            let n = l2_norm(r.view());
            r.mapv_inplace(|x| x / n);
        }
        w
    }

    #[test]
    fn equal_similarities_are_uniform() {
        let v = array![1.0, 0.0, 0.0];
        let w = Array2::from_shape_fn((11, 3), |_| 0.0) + &array![1.0, 0.0, 0.0];
        let p = class_probabilities(v.view(), w.view(), 0.01).unwrap();
        for &x in p.probs.iter() {
            assert_eq!(x, 1.0 / 11.0);
        }
    }

    #[test]
    fn sharp_temperature_concentrates_on_argmax() {
        let w = unit_rows(5, 4, 1);
        let v = unit_rows(1, 4, 2).row(0).to_owned();
        let warm = class_probabilities(v.view(), w.view(), 1.0).unwrap();
        let cold = class_probabilities(v.view(), w.view(), 1e-4).unwrap();
        assert_eq!(warm.argmax(), cold.argmax());
        assert!(cold.probs[cold.argmax()] > 0.999);
    }

    #[test]
    fn matches_direct_softmax_oracle() {
        let w = unit_rows(7, 6, 3);
        let v = unit_rows(1, 6, 4).row(0).to_owned();
        let p = class_probabilities(v.view(), w.view(), 0.01).unwrap();
        // direct re-computation without max subtraction
        let sims: Vec<f64> = w.rows().into_iter().map(|r| r.iter().zip(v.iter()).map(|(a, b)| a * b).sum()).collect();
        let exps: Vec<f64> = sims.iter().map(|s| (s / 0.01).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (a, e) in p.probs.iter().zip(&exps) {
            assert!((a - e / z).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_unnormalized_and_bad_temperature() {
        let w = unit_rows(3, 4, 3);
        let v = array![2.0, 0.0, 0.0, 0.0];
        assert!(class_probabilities(v.view(), w.view(), 0.01).is_err());
        let v = array![1.0, 0.0, 0.0, 0.0];
        assert!(class_probabilities(v.view(), w.view(), 0.0).is_err());
        assert!(class_probabilities(v.view(), (&w * 2.0).view(), 0.01).is_err());
    }

    #[test]
    fn entropy_reference_values() {
        assert!((entropy(&pv(&[1.0 / 11.0; 11])) - 11f64.ln()).abs() < 1e-9);
        assert_eq!(entropy(&pv(&[0.0, 1.0, 0.0])), 0.0);
        assert!((entropy(&pv(&[0.5, 0.5, 0.0, 0.0])) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn source_loss_edge_cases() {
        let one_hot = vec![pv(&[0.0, 1.0, 0.0]), pv(&[1.0, 0.0, 0.0])];
        assert_eq!(source_loss(&one_hot, &[1, 0], 3.0).unwrap(), 0.0);

        let batch = vec![pv(&[0.2, 0.5, 0.3]), pv(&[0.6, 0.1, 0.3])];
        let ce = source_loss(&batch, &[1, 0], 0.0).unwrap();
        assert!((ce - (-(0.5f64.ln()) - 0.6f64.ln()) / 2.0).abs() < 1e-12);

        assert!(source_loss(&batch, &[2, 0], 1.0).is_err());
    }

    #[test]
    fn source_loss_matches_two_term_oracle() {
        let w = unit_rows(5, 6, 10);
        let images = unit_rows(8, 6, 11);
        let probs: Vec<_> = images.rows().into_iter().map(|v| class_probabilities(v, w.view(), 0.05).unwrap()).collect();
        let labels = [0usize, 1, 2, 3, 0, 1, 2, 3];
        let lambda = 0.7;
        let ce: f64 = probs.iter().zip(&labels).map(|(p, &y)| -p.probs[y].ln()).sum::<f64>() / 8.0;
        let ent: f64 = probs.iter().map(|p| -p.probs.iter().map(|x| x * x.ln()).sum::<f64>()).sum::<f64>() / 8.0;
        let got = source_loss(&probs, &labels, lambda).unwrap();
        assert!((got - (ce + lambda * ent)).abs() < 1e-10);
    }

    #[test]
    fn target_loss_edge_cases() {
        let batch = vec![pv(&[0.3, 0.3, 0.4]), pv(&[0.0, 0.0, 1.0])];
        let none = target_loss(&batch, &[None, None], 1.0).unwrap();
        assert!(none.all_discarded());
        assert_eq!(none.value, 0.0);

        let unk = target_loss(&batch[1..], &[Some(2)], 0.0).unwrap();
        assert_eq!(unk.value, 0.0);

        let mixed = target_loss(&batch, &[Some(2), None], 0.5).unwrap();
        let expect = -(0.4f64.ln()) + 0.5 * entropy(&batch[0]);
        assert!((mixed.value - expect).abs() < 1e-12);
        assert_eq!(mixed.retained, 1);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let z = array![0.3f64, -1.2, 2.0, 0.7];
        let lambda = 0.8;
        let p = softmax(z.view());
        let g = instance_logit_grad(p.view(), 2, lambda, 1.0);
        let h = 1e-6;
        for k in 0..4 {
            let (mut a, mut b) = (z.clone(), z.clone());
            a[k] += h;
            b[k] -= h;
            let fa = instance_loss(softmax(a.view()).view(), 2, lambda);
            let fb = instance_loss(softmax(b.view()).view(), 2, lambda);
            assert!(((fa - fb) / (2.0 * h) - g[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn pseudo_label_examples() {
        let th = Thresholds {
            kappa_lower: 0.25,
            kappa_upper: 0.6,
            kappa_known: 0.6,
        };
        let d = assign_pseudo_label(&pv(&[0.05, 0.10, 0.20, 0.65]), th);
        assert_eq!(d.outcome, PseudoLabel::Unknown);
        let d = assign_pseudo_label(&pv(&[0.70, 0.10, 0.05, 0.15]), th);
        assert_eq!(d.outcome, PseudoLabel::Known(0));
        assert_eq!(d.confidence, 0.70);
        let d = assign_pseudo_label(&pv(&[0.45, 0.10, 0.05, 0.40]), th);
        assert_eq!(d.outcome, PseudoLabel::Discard);
        assert_eq!(d.label(3), None);
    }

    #[test]
    fn disabled_rules() {
        let off = Thresholds {
            kappa_lower: 0.0,
            kappa_upper: 1.5,
            kappa_known: 1.5,
        };
        for probs in [[0.9, 0.05, 0.05], [0.0, 0.0, 1.0], [0.3, 0.3, 0.4]] {
            assert_eq!(assign_pseudo_label(&pv(&probs), off).outcome, PseudoLabel::Discard);
        }
    }
}
