//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use ndarray::{Array, Dimension, Zip};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T, D: Dimension> {
    pub m: Array<T, D>,
    pub v: Array<T, D>,
    /// Number of updates applied to this tensor.
    pub step: u64,
}

impl<T: Scalar, D: Dimension> AdamState<T, D> {
    pub fn zeros_like(param: &Array<T, D>) -> Self {
        AdamState {
            m: Array::zeros(param.raw_dim()),
            v: Array::zeros(param.raw_dim()),
            step: 0,
        }
    }

    /// One AdamW update of `param` with `grad` at learning rate `lr`.
    pub fn update(&mut self, param: &mut Array<T, D>, grad: &Array<T, D>, lr: f64, hp: AdamWParams) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(hp.beta1);
        let b2 = T::lit(hp.beta2);
        let one = T::one();
        let lr_t = T::lit(lr);
        let decay = one - T::lit(lr * hp.weight_decay);
        let bc1 = T::lit(1.0 - hp.beta1.powi(t));
        let bc2 = T::lit(1.0 - hp.beta2.powi(t));
        let eps = T::lit(hp.eps);
        Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *p *= decay;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
            });
    }
}

/// Cosine annealing from `base_lr` at iteration 0 to exactly 0 at the last iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_iterations: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_iterations: usize) -> Self {
        CosineSchedule {
            base_lr,
            total_iterations,
        }
    }

    pub fn lr(&self, iteration: usize) -> f64 {
        if self.total_iterations <= 1 {
            return self.base_lr;
        }
        let last = (self.total_iterations - 1) as f64;
        let progress = (iteration as f64 / last).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_endpoints() {
        let s = CosineSchedule::new(0.001, 2000);
        assert_eq!(s.lr(0), 0.001);
        assert!(s.lr(1999).abs() < 1e-6);
        assert!((s.lr(1000) - 0.0005).abs() < 1e-6);
        let mut prev = f64::INFINITY;
        for t in 0..2000 {
            let lr = s.lr(t);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn first_step_matches_reference_arithmetic() {
        // t = 1: m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) after decay.
        let hp = AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut p = array![1.0f64, -2.0];
        let g = array![0.5f64, -0.25];
        let mut st = AdamState::zeros_like(&p);
        st.update(&mut p, &g, 0.1, hp);
        let expect0 = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        let expect1 = -2.0 * (1.0 - 0.1 * 0.01) + 0.1 * 0.25 / (0.25 + 1e-8);
        assert!((p[0] - expect0).abs() < 1e-12);
        assert!((p[1] - expect1).abs() < 1e-12);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let hp = AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut p = array![3.0f64, -4.0];
        let mut st = AdamState::zeros_like(&p);
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * x);
            st.update(&mut p, &g, 0.05, hp);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2));
    }
}
