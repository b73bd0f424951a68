//! Label spaces and open-set splits.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// Ordered known classes plus one trailing "unknown" output slot.
///
/// Row `i < len()` of every prompt, text-feature and probability matrix
/// corresponds to `known_classes()[i]`; row `unknown_index()` is the unknown slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelSpaceRepr", into = "LabelSpaceRepr")]
pub struct LabelSpace {
    known_classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct LabelSpaceRepr {
    known_classes: Vec<String>,
    unknown_index: usize,
}

impl TryFrom<LabelSpaceRepr> for LabelSpace {
    type Error = Error;

    fn try_from(repr: LabelSpaceRepr) -> Result<Self> {
        let space = build_label_space(repr.known_classes)?;
        if space.unknown_index() != repr.unknown_index {
            return Err(validation(format!(
                "unknown_index {} does not equal the number of known classes {}",
                repr.unknown_index,
                space.unknown_index()
            )));
        }
        Ok(space)
    }
}

impl From<LabelSpace> for LabelSpaceRepr {
    fn from(space: LabelSpace) -> Self {
        let unknown_index = space.unknown_index();
        LabelSpaceRepr {
            known_classes: space.known_classes,
            unknown_index,
        }
    }
}

/// Builds a label space, preserving order.
pub fn build_label_space<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<LabelSpace> {
    let known_classes: Vec<String> = names.into_iter().map(Into::into).collect();
    let mut seen = BTreeSet::new();
    for name in &known_classes {
        if name.trim().is_empty() {
            return Err(validation("class names must be non-empty"));
        }
        if !seen.insert(name.as_str()) {
            return Err(validation(format!("duplicate class name `{name}`")));
        }
    }
    if known_classes.is_empty() {
        return Err(validation("a label space needs at least one known class"));
    }
    Ok(LabelSpace { known_classes })
}

impl LabelSpace {
    pub fn known_classes(&self) -> &[String] {
        &self.known_classes
    }

    /// Number of known classes.
    pub fn len(&self) -> usize {
        self.known_classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known_classes.is_empty()
    }

    /// Index of the unknown output slot, equal to the number of known classes.
    pub fn unknown_index(&self) -> usize {
        self.known_classes.len()
    }

    /// Number of output slots: known classes plus unknown.
    pub fn num_outputs(&self) -> usize {
        self.known_classes.len() + 1
    }

    pub fn index_of(&self, class_name: &str) -> Option<usize> {
        self.known_classes.iter().position(|c| c == class_name)
    }

    /// Maps a ground-truth class name to an output index: known classes keep
    /// their row, everything else collapses to the unknown slot.
    pub fn target_index(&self, class_name: &str) -> usize {
        self.index_of(class_name).unwrap_or(self.unknown_index())
    }

    pub fn class_name(&self, index: usize) -> &str {
        self.known_classes
            .get(index)
            .map(String::as_str)
            .unwrap_or("unknown")
    }
}

/// Which classes are known, which are unknown, and which domains play which role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dataset_name: String,
    pub source_domain: String,
    pub target_domains: Vec<String>,
    pub known_classes: Vec<String>,
    pub unknown_classes: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_domains.is_empty() {
            return Err(validation("at least one target domain is required"));
        }
        if self.target_domains.contains(&self.source_domain) {
            return Err(validation(format!(
                "source domain `{}` is also listed as a target",
                self.source_domain
            )));
        }
        let mut domains = BTreeSet::new();
        for d in &self.target_domains {
            if !domains.insert(d) {
                return Err(validation(format!("duplicate target domain `{d}`")));
            }
        }
        build_label_space(self.known_classes.iter().cloned())?;
        let known: BTreeSet<&String> = self.known_classes.iter().collect();
        let mut unknown = BTreeSet::new();
        for c in &self.unknown_classes {
            if known.contains(c) {
                return Err(validation(format!("class `{c}` is both known and unknown")));
            }
            if !unknown.insert(c) {
                return Err(validation(format!("duplicate unknown class `{c}`")));
            }
        }
        if self.unknown_classes.is_empty() {
            return Err(validation("an open-set split needs at least one unknown class"));
        }
        Ok(())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        build_label_space(self.known_classes.iter().cloned())
    }

    /// Number of target domains.
    pub fn q(&self) -> usize {
        self.target_domains.len()
    }

    /// All target classes, known first.
    pub fn target_classes(&self) -> impl Iterator<Item = &String> {
        self.known_classes.iter().chain(self.unknown_classes.iter())
    }

    pub fn is_known(&self, class_name: &str) -> bool {
        self.known_classes.iter().any(|c| c == class_name)
    }

    pub fn is_target_class(&self, class_name: &str) -> bool {
        self.target_classes().any(|c| c == class_name)
    }
}
