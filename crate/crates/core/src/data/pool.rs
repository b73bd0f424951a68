//! Resolving records to normalized image features.

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use super::{BlendedTargets, ExampleRecord, FeatureCache, ItemRef};
use crate::encoders::ImageEncoder;
use crate::error::{validation, Result};
use crate::label::{LabelSpace, SplitSpec};
use crate::prompts::stack_rows;
use crate::scalar::Scalar;

/// Where raw features come from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    /// Precomputed encoder outputs keyed by record path.
    Cache(FeatureCache),
    /// Image files under a dataset root, encoded on demand.
    Images(PathBuf),
}

impl FeatureSource {
    pub fn feature<T: Scalar, I: ImageEncoder<T> + ?Sized>(&self, item: &ItemRef, encoder: &I) -> Result<Array1<T>> {
        match (self, item) {
            (FeatureSource::Cache(cache), _) => {
                let raw = cache.vector::<T>(&item.cache_key())?;
                encoder.encode_feature(raw.view())
            }
            (FeatureSource::Images(root), ItemRef::Path(p)) => encoder.encode_image(&root.join(p)),
            (FeatureSource::Images(_), ItemRef::Feature(k)) => {
                Err(validation(format!("record `{k}` references a cached feature but no cache is loaded")))
            }
        }
    }

    fn features<T: Scalar, I: ImageEncoder<T> + ?Sized>(&self, items: &[&ItemRef], encoder: &I) -> Result<Array2<T>> {
        let rows = items
            .par_iter()
            .map(|item| self.feature(item, encoder))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Array2::zeros((0, encoder.feature_dim())));
        }
        Ok(stack_rows(&rows))
    }
}

/// Labeled source features, rows L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePool<T> {
    pub features: Array2<T>,
    pub labels: Vec<usize>,
}

/// Unlabeled target features, rows L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPool<T> {
    pub features: Array2<T>,
}

impl<T> SourcePool<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl<T> TargetPool<T> {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// Source-domain records of known classes, encoded.
pub fn encode_source_pool<T: Scalar, I: ImageEncoder<T> + ?Sized>(
    records: &[ExampleRecord],
    split: &SplitSpec,
    labels: &LabelSpace,
    source: &FeatureSource,
    encoder: &I,
) -> Result<SourcePool<T>> {
    let mut items = Vec::new();
    let mut ys = Vec::new();
    for r in records.iter().filter(|r| r.domain_tag == split.source_domain) {
        let Some(class) = r.class_name.as_deref() else {
            return Err(validation(format!("source record {} has no class", r.item_ref.cache_key())));
        };
        if let Some(y) = labels.index_of(class) {
            items.push(&r.item_ref);
            ys.push(y);
        }
    }
    if items.is_empty() {
        return Err(validation(format!(
            "source domain `{}` has no records of known classes",
            split.source_domain
        )));
    }
    Ok(SourcePool {
        features: source.features(&items, encoder)?,
        labels: ys,
    })
}

/// The blended training view, encoded. Row order follows the pool.
pub fn encode_target_pool<T: Scalar, I: ImageEncoder<T> + ?Sized>(
    blended: &BlendedTargets,
    source: &FeatureSource,
    encoder: &I,
) -> Result<TargetPool<T>> {
    let items: Vec<&ItemRef> = blended.training_view().iter().map(|t| &t.item_ref).collect();
    Ok(TargetPool {
        features: source.features(&items, encoder)?,
    })
}
