//! Pre-norm transformer blocks with a backward pass to the block inputs.
//!
//! Weights are frozen, so only input gradients are propagated.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::scalar::Scalar;

/// Affine map `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn backward(&self, grad: ArrayView2<T>) -> Array2<T> {
        grad.dot(&self.weight)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub eps: f64,
}

/// Normalized rows and reciprocal standard deviations, kept for backward.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, NormCache<T>) {
        let d = T::from_usize(x.ncols()).expect("width");
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / d;
            *r = T::one() / (var + T::lit(self.eps)).sqrt();
            let k = *r;
            row.mapv_inplace(|v| v * k);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &NormCache<T>, grad: ArrayView2<T>) -> Array2<T> {
        let d = T::from_usize(grad.ncols()).expect("width");
        let g = &grad * &self.gamma;
        let mut out = Array2::zeros(grad.raw_dim());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let gi = g.row(i);
            let xi = cache.xhat.row(i);
            let mean_g = gi.sum() / d;
            let mean_gx = gi.dot(&xi) / d;
            let r = cache.rstd[i];
            row.zip_mut_with(&gi, |o, &gv| *o = gv);
            row.zip_mut_with(&xi, |o, &xv| *o = r * (*o - mean_g - xv * mean_gx));
        }
        out
    }
}

/// `x · σ(1.702 x)`.
fn quick_gelu<T: Scalar>(x: T) -> T {
    x * sigmoid(T::lit(1.702) * x)
}

fn quick_gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(1.702);
    let s = sigmoid(k * x);
    s + k * x * s * (T::one() - s)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[derive(Debug, Clone)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub heads: usize,
}

/// Everything one block's backward pass needs.
pub struct BlockTape<T> {
    norm1: NormCache<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    norm2: NormCache<T>,
    pre_act: Array2<T>,
}

impl<T: Scalar> Block<T> {
    fn head_dim(&self) -> usize {
        self.q.out_dim() / self.heads
    }

    fn attention_probs(&self, q: ArrayView2<T>, k: ArrayView2<T>, causal: bool) -> Array2<T> {
        let mut scores = q.dot(&k.t());
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            if causal {
                row.slice_mut(s![i + 1..]).fill(T::neg_infinity());
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|z| (z - max).exp());
            let total = row.sum();
            row.mapv_inplace(|z| z / total);
        }
        scores
    }

    pub fn forward(&self, x: ArrayView2<T>, causal: bool) -> (Array2<T>, BlockTape<T>) {
        let (h1, norm1) = self.ln1.forward(x);
        let scale = T::one() / T::from_usize(self.head_dim()).expect("head dim").sqrt();
        let q = self.q.forward(h1.view()) * scale;
        let k = self.k.forward(h1.view());
        let v = self.v.forward(h1.view());
        let hd = self.head_dim();
        let mut context = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let p = self.attention_probs(q.slice(cols), k.slice(cols), causal);
            context.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let mid = &x + &self.out.forward(context.view());
        let (h2, norm2) = self.ln2.forward(mid.view());
        let pre_act = self.fc1.forward(h2.view());
        let act = pre_act.mapv(quick_gelu);
        let y = &mid + &self.fc2.forward(act.view());
        let tape = BlockTape {
            norm1,
            q,
            k,
            v,
            probs,
            norm2,
            pre_act,
        };
        (y, tape)
    }

    /// Forward pass without keeping a tape.
    pub fn apply(&self, x: ArrayView2<T>, causal: bool) -> Array2<T> {
        self.forward(x, causal).0
    }

    pub fn backward(&self, tape: &BlockTape<T>, grad: ArrayView2<T>) -> Array2<T> {
        // MLP branch.
        let g_act = self.fc2.backward(grad);
        let g_pre = &g_act * &tape.pre_act.mapv(quick_gelu_grad);
        let g_h2 = self.fc1.backward(g_pre.view());
        let g_mid = &grad + &self.ln2.backward(&tape.norm2, g_h2.view());

        // Attention branch.
        let g_context = self.out.backward(g_mid.view());
        let hd = self.head_dim();
        let scale = T::one() / T::from_usize(hd).expect("head dim").sqrt();
        let mut g_q = Array2::zeros(tape.q.raw_dim());
        let mut g_k = Array2::zeros(tape.k.raw_dim());
        let mut g_v = Array2::zeros(tape.v.raw_dim());
        for (h, p) in tape.probs.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let g_o = g_context.slice(cols);
            let g_p = g_o.dot(&tape.v.slice(cols).t());
            g_v.slice_mut(cols).assign(&p.t().dot(&g_o));
            let row_dot = (&g_p * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let g_s = p * &(&g_p - &row_dot);
            g_q.slice_mut(cols).assign(&(g_s.dot(&tape.k.slice(cols)) * scale));
            g_k.slice_mut(cols).assign(&g_s.t().dot(&tape.q.slice(cols)));
        }
        let g_h1 = self.q.backward(g_q.view()) + self.k.backward(g_k.view()) + self.v.backward(g_v.view());
        g_mid + self.ln1.backward(&tape.norm1, g_h1.view())
    }
}

/// Unit vector of `raw` and the norm it was divided by.
pub fn normalize_with_norm<T: Scalar>(raw: ArrayView1<T>) -> (Array1<T>, T) {
    let norm = raw.dot(&raw).sqrt();
    (raw.mapv(|x| x / norm), norm)
}

/// Gradient of `raw` given the gradient of `unit = raw / ‖raw‖`.
pub fn normalize_backward<T: Scalar>(unit: ArrayView1<T>, norm: T, grad: ArrayView1<T>) -> Array1<T> {
    let along = unit.dot(&grad);
    (&grad - &(&unit * along)).mapv(|g| g / norm)
}
