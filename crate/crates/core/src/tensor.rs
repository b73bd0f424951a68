//! Small dense-array helpers shared by the numeric modules.

use ndarray::{Array, Array1, ArrayView1, ArrayView2, Dimension, ShapeBuilder};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::scalar::{encode_le, Scalar};

pub fn l2_norm<T: Scalar>(v: ArrayView1<T>) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Returns `v / ‖v‖`. A zero vector is returned unchanged.
pub fn l2_normalize<T: Scalar>(v: ArrayView1<T>) -> Array1<T> {
    let n = l2_norm(v);
    if n > T::zero() {
        v.mapv(|x| x / n)
    } else {
        v.to_owned()
    }
}

/// `xᵀA` computed row by row, avoiding strided access into `A`.
pub fn vec_mat<T: Scalar>(x: ArrayView1<T>, a: ArrayView2<T>) -> Array1<T> {
    let mut out = Array1::zeros(a.ncols());
    for (xi, row) in x.iter().zip(a.rows()) {
        if *xi != T::zero() {
            out.scaled_add(*xi, &row);
        }
    }
    out
}

/// Array of i.i.d. `N(0, std²)` entries.
pub fn gaussian<T: Scalar, Sh: ShapeBuilder, R: Rng + ?Sized>(
    shape: Sh,
    std: f64,
    rng: &mut R,
) -> Array<T, Sh::Dim> {
    Array::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

/// Incremental SHA-256 over shapes and raw little-endian contents.
#[derive(Default)]
pub struct Fingerprint(Sha256);

impl Fingerprint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tag(&mut self, tag: &str) -> &mut Self {
        self.0.update((tag.len() as u64).to_le_bytes());
        self.0.update(tag.as_bytes());
        self
    }

    pub fn array<T: Scalar, D: Dimension>(&mut self, a: &Array<T, D>) -> &mut Self {
        for &d in a.shape() {
            self.0.update((d as u64).to_le_bytes());
        }
        let flat: Vec<T> = a.iter().copied().collect();
        self.0.update(encode_le(&flat));
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update(b);
        self
    }

    pub fn hex(&self) -> String {
        self.0
            .clone()
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalize_gives_unit_norm() {
        let v = array![3.0f64, 4.0];
        let n = l2_normalize(v.view());
        assert!((l2_norm(n.view()) - 1.0).abs() < 1e-12);
        let z = array![0.0f64, 0.0];
        assert_eq!(l2_normalize(z.view()), z);
    }

    #[test]
    fn fingerprint_sees_shape_and_bits() {
        let a = array![[1.0f32, 2.0], [3.0, 4.0]];
        let b = a.clone().into_shape_with_order((4,)).unwrap();
        let fa = Fingerprint::new().array(&a).hex();
        let fb = Fingerprint::new().array(&b).hex();
        assert_ne!(fa, fb);
        assert_eq!(fa, Fingerprint::new().array(&a.clone()).hex());
    }
}
