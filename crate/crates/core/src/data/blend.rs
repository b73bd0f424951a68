use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExampleRecord, TargetItem};
use crate::error::{validation, Result};
use crate::label::SplitSpec;

/// Ground truth withheld from training, kept aligned with the training view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedLabel {
    pub class_name: String,
    pub domain_tag: String,
}

/// All target domains merged into one unlabeled pool.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendedTargets {
    items: Vec<TargetItem>,
    sealed: Vec<SealedLabel>,
    pub warnings: Vec<String>,
}

impl BlendedTargets {
    /// What the trainer may see.
    pub fn training_view(&self) -> &[TargetItem] {
        &self.items
    }

    /// Evaluation-only side table, index-aligned with [`Self::training_view`].
    pub fn sealed(&self) -> &[SealedLabel] {
        &self.sealed
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn per_domain_sizes(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in &self.sealed {
            *out.entry(s.domain_tag.clone()).or_insert(0) += 1;
        }
        out
    }
}

/// Pools every record from the split's target domains into one shuffled,
/// unlabeled pool. Records of classes outside the split are skipped.
pub fn blend_targets(records: &[ExampleRecord], split: &SplitSpec, seed: u64) -> Result<BlendedTargets> {
    let mut warnings = Vec::new();
    let mut pairs = Vec::new();
    let mut seen: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut skipped = 0usize;
    for r in records {
        if !split.target_domains.contains(&r.domain_tag) {
            continue;
        }
        let Some(class) = r.class_name.as_deref() else {
            return Err(validation(format!(
                "target record {} has no ground-truth class for the evaluation table",
                r.item_ref.cache_key()
            )));
        };
        if !split.is_target_class(class) {
            skipped += 1;
            continue;
        }
        seen.entry(r.domain_tag.as_str()).or_default().insert(class);
        pairs.push((
            TargetItem {
                item_ref: r.item_ref.clone(),
            },
            SealedLabel {
                class_name: class.to_string(),
                domain_tag: r.domain_tag.clone(),
            },
        ));
    }
    if pairs.is_empty() {
        return Err(validation("blended target pool is empty"));
    }
    if skipped > 0 {
        warnings.push(format!("{skipped} target records belong to classes outside the split"));
    }
    for d in &split.target_domains {
        let present = seen.get(d.as_str());
        let missing = split
            .target_classes()
            .filter(|c| !present.is_some_and(|p| p.contains(c.as_str())))
            .count();
        if missing > 0 {
            warnings.push(format!("target domain `{d}` is missing {missing} of the target classes"));
        }
    }
    for w in &warnings {
        warn!("{w}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let (items, sealed) = pairs.into_iter().unzip();
    Ok(BlendedTargets {
        items,
        sealed,
        warnings,
    })
}
