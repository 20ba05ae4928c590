// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled text embeddings: class prompts, spurious-attribute prompts,
//! concept pairs and caption subsets.
//!
//! A bank is stored as `<name>.json` (labels, kind, dim, checksum) next to
//! `<name>.bin` holding `[n_entries, dim]` packed `float32`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::blob;
use crate::error::{Error, Result};
use crate::tensor::norm;

/// What a bank's entries are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    /// One prompt per class, in class-index order.
    ClassPrompt,
    /// One prompt per spurious attribute, in attribute-index order.
    SpuriousPrompt,
    /// `<name>:pos` / `<name>:neg` pairs used for knowledge injection.
    ConceptPair,
    /// Embeddings of caption token subsets.
    CaptionSubset,
}

/// `(stem, positive, negative)` embeddings of one concept.
pub type ConceptPair = (String, Vec<f32>, Vec<f32>);

/// Ordered label → vector table.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    kind: BankKind,
    labels: Vec<String>,
    vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankManifest {
    schema_version: u32,
    kind: BankKind,
    dim: usize,
    labels: Vec<String>,
    tensor_file: String,
    dtype: String,
    byte_order: String,
    sha256: String,
}

/// Suffix marking the positive side of a concept pair.
pub const POS_SUFFIX: &str = ":pos";
/// Suffix marking the negative side of a concept pair.
pub const NEG_SUFFIX: &str = ":neg";

impl TextBank {
    /// Build a bank, rejecting non-finite or zero vectors, ragged dims and
    /// duplicate labels.
    pub fn new(kind: BankKind, entries: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let dim = entries.first().map(|(_, v)| v.len()).unwrap_or(0);
        let mut seen = HashSet::new();
        let mut labels = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        for (label, v) in entries {
            if v.len() != dim {
                return Err(Error::Dimension(format!(
                    "text bank entry {label:?} has dim {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "text bank entry {label:?} is not finite"
                )));
            }
            if norm(&v) == 0.0 {
                return Err(Error::InvalidInput(format!(
                    "text bank entry {label:?} is a zero vector"
                )));
            }
            if !seen.insert(label.clone()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate text bank label {label:?}"
                )));
            }
            labels.push(label);
            vectors.push(v);
        }
        Ok(Self {
            kind,
            labels,
            vectors,
        })
    }

    /// Bank kind.
    pub fn kind(&self) -> BankKind {
        self.kind
    }

    /// Number of entries.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Whether the bank has no entries.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Vector width (0 for an empty bank).
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Labels in index order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Vector at `index`.
    pub fn vector(&self, index: usize) -> &[f32] {
        &self.vectors[index]
    }

    /// Vector by label.
    pub fn get(&self, label: &str) -> Option<&[f32]> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.vectors[i].as_slice())
    }

    /// Concept pairs keyed by the label stem, in order of first appearance.
    ///
    /// Fails if a stem has only one side.
    pub fn concept_pairs(&self) -> Result<Vec<ConceptPair>> {
        let mut stems: Vec<&str> = Vec::new();
        for label in &self.labels {
            let stem = label
                .strip_suffix(POS_SUFFIX)
                .or_else(|| label.strip_suffix(NEG_SUFFIX))
                .ok_or_else(|| {
                    Error::InvalidInput(format!("concept label {label:?} lacks a :pos/:neg suffix"))
                })?;
            if !stems.contains(&stem) {
                stems.push(stem);
            }
        }
        stems
            .into_iter()
            .map(|stem| {
                let pos = self.get(&format!("{stem}{POS_SUFFIX}"));
                let neg = self.get(&format!("{stem}{NEG_SUFFIX}"));
                match (pos, neg) {
                    (Some(p), Some(n)) => Ok((stem.to_string(), p.to_vec(), n.to_vec())),
                    _ => Err(Error::InvalidInput(format!(
                        "concept {stem:?} is missing one side"
                    ))),
                }
            })
            .collect()
    }

    /// Write `<path>` (manifest) and `<path>.bin`-style sibling blob.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let blob_path = blob_path(path);
        let flat: Vec<f32> = self.vectors.iter().flatten().copied().collect();
        let sha256 = blob::write_f32(&blob_path, &flat)?;
        let manifest = BankManifest {
            schema_version: blob::SCHEMA_VERSION,
            kind: self.kind,
            dim: self.dim(),
            labels: self.labels.clone(),
            tensor_file: blob_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            dtype: blob::DTYPE.into(),
            byte_order: blob::BYTE_ORDER.into(),
            sha256,
        };
        blob::write_json(path, &manifest)
    }

    /// Read a bank written by [`TextBank::write`].
    pub fn read(path: &Path) -> Result<Self> {
        let manifest: BankManifest = blob::read_json(path)?;
        blob::check_encoding(path, &manifest.dtype, &manifest.byte_order)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let n = manifest.labels.len();
        let flat = blob::read_f32(
            &dir.join(&manifest.tensor_file),
            n * manifest.dim,
            Some(&manifest.sha256),
        )?;
        let entries = manifest
            .labels
            .into_iter()
            .zip(flat.chunks(manifest.dim.max(1)).map(<[f32]>::to_vec))
            .collect();
        Self::new(manifest.kind, entries)
    }
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}
