//! Vision transformer forward pass and image preprocessing.
//!
//! Preprocessing resizes the shortest side with a Catmull-Rom filter, center
//! crops, and normalizes with the published channel statistics. The reference
//! pipeline uses PIL bicubic resampling, so pixels can differ slightly.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::{s, Array1, Array2, Array3, ArrayView3};

use super::weights::VisionTower;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PIXEL_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
pub const PIXEL_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

/// Loads an image file as normalized `3 × size × size` pixels.
pub fn preprocess<T: Scalar>(path: &Path, size: usize) -> Result<Array3<T>> {
    let img = image::open(path).map_err(|e| Error::Format(format!("cannot decode image {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("image {} is empty", path.display())));
    }
    let scale = size as f64 / w.min(h) as f64;
    let (nw, nh) = (
        ((w as f64 * scale).round() as usize).max(size),
        ((h as f64 * scale).round() as usize).max(size),
    );
    let resized = img.resize_exact(nw as u32, nh as u32, FilterType::CatmullRom).to_rgb8();
    let (left, top) = ((nw - size) / 2, (nh - size) / 2);
    let mut out = Array3::zeros((3, size, size));
    for i in 0..size {
        for j in 0..size {
            let px = resized.get_pixel((left + j) as u32, (top + i) as u32);
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                out[[c, i, j]] = T::lit((v - PIXEL_MEAN[c]) / PIXEL_STD[c]);
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> VisionTower<T> {
    /// Unnormalized image embedding of preprocessed pixels.
    pub fn forward(&self, pixels: ArrayView3<T>) -> Result<Array1<T>> {
        let (c, h, w) = pixels.dim();
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::ShapeMismatch {
                name: "pixels".into(),
                expected: vec![3, self.image_size, self.image_size],
                found: vec![c, h, w],
            });
        }
        let p = self.patch_size;
        let grid = self.image_size / p;
        let width = self.patch.nrows();
        // Flattened in (channel, row, column) order, as the kernel is.
        let mut patches = Array2::zeros((grid * grid, 3 * p * p));
        for gi in 0..grid {
            for gj in 0..grid {
                let block = pixels.slice(s![.., gi * p..(gi + 1) * p, gj * p..(gj + 1) * p]);
                let mut row = patches.row_mut(gi * grid + gj);
                for (dst, &v) in row.iter_mut().zip(block.iter()) {
                    *dst = v;
                }
            }
        }
        let mut x = Array2::zeros((grid * grid + 1, width));
        x.row_mut(0).assign(&self.class_embedding);
        x.slice_mut(s![1.., ..]).assign(&patches.dot(&self.patch.t()));
        x += &self.positional;
        let (mut x, _) = self.pre_ln.forward(x.view());
        for block in &self.blocks {
            x = block.apply(x.view(), false);
        }
        let (pooled, _) = self.post_ln.forward(x.slice(s![0..1, ..]));
        Ok(pooled.row(0).dot(&self.projection))
    }
}
