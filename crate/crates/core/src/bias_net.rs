//! Domain-specific bias network: image feature `v` to the bias token `β`.
//!
//! `β = W2ᵀ · relu(W1ᵀ · v + b1) + b2`, with `W1: d_v × h` and `W2: h × d_t`.
//! The output layer is linear and starts at zero, so a fresh network emits
//! `β = 0` and the first prompts are exactly the unbiased ones.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gaussian, vec_mat};

/// The trainable parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasNetParams<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// Hidden pre-activation kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BiasCache<T> {
    pre: Array1<T>,
    hidden: Array1<T>,
}

/// Gradients with the same layout as [`BiasNetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct BiasGrads<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Scalar> BiasNetParams<T> {
    /// First layer Gaussian with std `1/sqrt(d_v)`, everything else zero.
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, hidden: usize, token_dim: usize, rng: &mut R) -> Self {
        BiasNetParams {
            w1: gaussian((feature_dim, hidden), 1.0 / (feature_dim as f64).sqrt(), rng),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, token_dim)),
            b2: Array1::zeros(token_dim),
        }
    }

    pub fn zeros(feature_dim: usize, hidden: usize, token_dim: usize) -> Self {
        BiasNetParams {
            w1: Array2::zeros((feature_dim, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, token_dim)),
            b2: Array1::zeros(token_dim),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn token_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn forward(&self, v: ArrayView1<T>) -> Result<(Array1<T>, BiasCache<T>)> {
        if v.len() != self.feature_dim() {
            return Err(Error::Dimension {
                context: "bias network input".into(),
                expected: self.feature_dim(),
                found: v.len(),
            });
        }
        let pre = vec_mat(v, self.w1.view()) + &self.b1;
        let hidden = pre.mapv(|x| x.max(T::zero()));
        let beta = vec_mat(hidden.view(), self.w2.view()) + &self.b2;
        Ok((beta, BiasCache { pre, hidden }))
    }

    /// Gradients of a scalar loss given `∂L/∂β`; also returns `∂L/∂v`.
    pub fn backward(
        &self,
        v: ArrayView1<T>,
        cache: &BiasCache<T>,
        grad_beta: ArrayView1<T>,
    ) -> (BiasGrads<T>, Array1<T>) {
        let h = self.hidden();
        let dt = self.token_dim();
        let w2 = outer(cache.hidden.view(), grad_beta);
        let grad_hidden = self.w2.dot(&grad_beta);
        let mut grad_pre = grad_hidden;
        Zip::from(&mut grad_pre).and(&cache.pre).for_each(|g, &p| {
            if p <= T::zero() {
                *g = T::zero();
            }
        });
        let w1 = outer(v, grad_pre.view());
        let grad_v = self.w1.dot(&grad_pre);
        debug_assert_eq!(w2.dim(), (h, dt));
        (
            BiasGrads {
                w1,
                b1: grad_pre,
                w2,
                b2: grad_beta.to_owned(),
            },
            grad_v,
        )
    }
}

fn outer<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> Array2<T> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

impl<T: Scalar> BiasGrads<T> {
    pub fn zeros_like(p: &BiasNetParams<T>) -> Self {
        BiasGrads {
            w1: Array2::zeros(p.w1.dim()),
            b1: Array1::zeros(p.b1.len()),
            w2: Array2::zeros(p.w2.dim()),
            b2: Array1::zeros(p.b2.len()),
        }
    }

    pub fn add_assign(&mut self, other: &BiasGrads<T>) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    pub fn is_zero(&self) -> bool {
        let zero = |x: &T| *x == T::zero();
        self.w1.iter().all(zero) && self.b1.iter().all(zero) && self.w2.iter().all(zero) && self.b2.iter().all(zero)
    }
}

/// `β` for a single feature vector.
pub fn compute_bias<T: Scalar>(v: ArrayView1<T>, params: &BiasNetParams<T>) -> Result<Array1<T>> {
    params.forward(v).map(|(beta, _)| beta)
}

/// Trainable parameter count: known context, unknown context, then the bias network.
pub fn count_trainable_params(
    context_length: usize,
    feature_dim: usize,
    token_dim: usize,
    hidden: usize,
) -> usize {
    2 * context_length * token_dim + (feature_dim * hidden + hidden) + (hidden * token_dim + token_dim)
}

/// Formats a count the way parameter tables print it, e.g. `37,408 (37.4K)`.
pub fn format_param_count(count: usize) -> String {
    let digits = count.to_string();
    let mut grouped = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            grouped.push(',');
        }
        grouped.push(ch);
    }
    format!("{grouped} ({:.1}K)", count as f64 / 1000.0)
}
