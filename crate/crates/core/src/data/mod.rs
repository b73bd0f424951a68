//! Dataset ingestion, open-set splits, blended target pools and batch sampling.

mod blend;
mod cache;
mod manifest;
mod pool;
mod sampler;
mod scan;
mod split;
pub mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use blend::{blend_targets, BlendedTargets, SealedLabel};
pub(crate) use cache::write_atomic;
pub use cache::{read_feature_cache, FeatureCache, FeatureCacheWriter, CacheEntry, CACHE_BLOB, CACHE_INDEX};
pub use manifest::{read_manifest, write_manifest, MANIFEST_FILE};
pub use pool::{encode_source_pool, encode_target_pool, FeatureSource, SourcePool, TargetPool};
pub use sampler::{sample_batch_pairs, BatchPair, BatchSampler};
pub use scan::{load_dataset, scan_dataset, ScanOutcome};
pub use split::{make_open_set_split, read_split_file, target_sample_counts, write_split_file, SampleCounts, SplitFile};

/// Where an example's pixels or features live.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemRef {
    /// Image file path, relative to the dataset root.
    Path(PathBuf),
    /// Key into a feature cache.
    Feature(String),
}

impl ItemRef {
    /// Key used to look the item up in a feature cache.
    pub fn cache_key(&self) -> String {
        match self {
            ItemRef::Path(p) => p.to_string_lossy().replace('\\', "/"),
            ItemRef::Feature(k) => k.clone(),
        }
    }
}

/// One ingested example. Only ingestion and evaluation see labels of target records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub item_ref: ItemRef,
    pub class_name: Option<String>,
    pub domain_tag: String,
    pub is_source: bool,
}

/// Trainer-visible view of an unlabeled target example: no class, no domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetItem {
    pub item_ref: ItemRef,
}
