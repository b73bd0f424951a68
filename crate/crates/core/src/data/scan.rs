use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::manifest::{read_manifest, MANIFEST_FILE};
use super::{ExampleRecord, ItemRef};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 7] = ["jpg", "jpeg", "png", "bmp", "gif", "webp", "tif"];

/// Records found under a dataset root plus any non-fatal problems.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanOutcome {
    pub records: Vec<ExampleRecord>,
    pub warnings: Vec<String>,
}

impl ScanOutcome {
    fn warn(&mut self, msg: String) {
        warn!("{msg}");
        self.warnings.push(msg);
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.records.iter().filter_map(|r| r.class_name.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn domains(&self) -> Vec<String> {
        let mut d: Vec<String> = self.records.iter().map(|r| r.domain_tag.clone()).collect();
        d.sort();
        d.dedup();
        d
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Walks `root/domain/class/image`. An empty `domains` list means every
/// subdirectory of `root`. Records come out in lexicographic order.
pub fn scan_dataset(root: &Path, domains: &[String]) -> Result<ScanOutcome> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root does not exist"),
        ));
    }
    let mut out = ScanOutcome::default();
    let domain_dirs: Vec<PathBuf> = if domains.is_empty() {
        sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect()
    } else {
        let mut dirs = Vec::new();
        for d in domains {
            let dir = root.join(d);
            if !dir.is_dir() {
                return Err(Error::Validation(format!(
                    "domain directory `{}` is missing",
                    dir.display()
                )));
            }
            dirs.push(dir);
        }
        dirs
    };
    if domain_dirs.is_empty() {
        out.warn(format!("no domain directories under {}", root.display()));
        return Ok(out);
    }
    for dir in domain_dirs {
        let domain = file_name(&dir);
        for class_dir in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
            let class = file_name(&class_dir);
            let mut found = 0usize;
            for img in sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
                let rel = img.strip_prefix(root).expect("under root").to_path_buf();
                out.records.push(ExampleRecord {
                    item_ref: ItemRef::Path(rel),
                    class_name: Some(class.clone()),
                    domain_tag: domain.clone(),
                    is_source: false,
                });
                found += 1;
            }
            if found == 0 {
                out.warn(format!("class directory {} has no images", class_dir.display()));
            }
        }
    }
    Ok(out)
}

/// Loads a dataset root: `manifest.tsv` when present, otherwise a directory scan.
pub fn load_dataset(root: &Path, domains: &[String]) -> Result<ScanOutcome> {
    let manifest = root.join(MANIFEST_FILE);
    if manifest.is_file() {
        let mut records = read_manifest(&manifest)?;
        if !domains.is_empty() {
            for d in domains {
                if !records.iter().any(|r| &r.domain_tag == d) {
                    return Err(Error::Validation(format!("domain `{d}` not present in manifest")));
                }
            }
            records.retain(|r| domains.contains(&r.domain_tag));
        }
        return Ok(ScanOutcome {
            records,
            warnings: Vec::new(),
        });
    }
    scan_dataset(root, domains)
}
