use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExampleRecord;
use crate::error::{validation, Error, Result};
use crate::label::SplitSpec;

/// Known classes are the lexicographically first `n_known`; the rest are unknown.
pub fn make_open_set_split(
    dataset_name: &str,
    all_classes: &[String],
    n_known: usize,
    source: &str,
    targets: &[String],
    seed: u64,
) -> Result<SplitSpec> {
    let classes: Vec<String> = all_classes.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if n_known == 0 {
        return Err(validation("n_known must be at least 1"));
    }
    if n_known >= classes.len() {
        return Err(validation(format!(
            "n_known = {n_known} leaves no unknown classes among {} classes (closed set)",
            classes.len()
        )));
    }
    let split = SplitSpec {
        dataset_name: dataset_name.to_string(),
        source_domain: source.to_string(),
        target_domains: targets.to_vec(),
        known_classes: classes[..n_known].to_vec(),
        unknown_classes: classes[n_known..].to_vec(),
        seed,
    };
    split.validate()?;
    Ok(split)
}

/// Split document written by the `split` command: the split plus where the data lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub dataset_root: PathBuf,
    #[serde(flatten)]
    pub split: SplitSpec,
}

pub fn write_split_file(path: &Path, file: &SplitFile) -> Result<()> {
    let text = serde_json::to_string_pretty(file)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_split_file(path: &Path) -> Result<SplitFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut file: SplitFile = serde_json::from_str(&text)?;
    file.split.validate()?;
    if file.dataset_root.is_relative() {
        if let Some(parent) = path.parent() {
            file.dataset_root = parent.join(&file.dataset_root);
        }
    }
    Ok(file)
}

/// Known/unknown sample totals over the target domains of a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleCounts {
    pub known: usize,
    pub unknown: usize,
}

pub fn target_sample_counts(records: &[ExampleRecord], split: &SplitSpec) -> SampleCounts {
    let mut counts = SampleCounts::default();
    for r in records.iter().filter(|r| split.target_domains.contains(&r.domain_tag)) {
        match r.class_name.as_deref() {
            Some(c) if split.is_known(c) => counts.known += 1,
            Some(c) if split.unknown_classes.iter().any(|u| u == c) => counts.unknown += 1,
            _ => {}
        }
    }
    counts
}
