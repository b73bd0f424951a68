//! Tab-separated manifest: `relative_path`, `class_name`, `domain`, one record per line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExampleRecord, ItemRef};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    relative_path: String,
    class_name: String,
    domain: String,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ExampleRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        out.push(ExampleRecord {
            item_ref: ItemRef::Path(PathBuf::from(row.relative_path)),
            class_name: Some(row.class_name).filter(|c| !c.is_empty()),
            domain_tag: row.domain,
            is_source: false,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ExampleRecord]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    for r in records {
        writer
            .serialize(Row {
                relative_path: r.item_ref.cache_key(),
                class_name: r.class_name.clone().unwrap_or_default(),
                domain: r.domain_tag.clone(),
            })
            .map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
