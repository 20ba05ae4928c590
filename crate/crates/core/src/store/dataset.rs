// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset manifests: one row per sample with its class, spurious attribute
//! and split.
//!
//! File format (delimited text):
//!
//! ```text
//! #classes=landbird|waterbird
//! #spurious=land|water
//! sample_id,class_index,spurious_index,split
//! img_000,0,0,test
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dataset split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Validation split (used for locating heads).
    Val,
    /// Test split.
    Test,
    /// Easy subset of a two-split benchmark.
    Easy,
    /// Hard subset of a two-split benchmark.
    Hard,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Val => "val",
            Split::Test => "test",
            Split::Easy => "easy",
            Split::Hard => "hard",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "easy" => Ok(Split::Easy),
            "hard" => Ok(Split::Hard),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Identifier matching the activation store.
    pub sample_id: String,
    /// Index into `class_names`.
    pub class_index: usize,
    /// Index into `spurious_names`.
    pub spurious_index: usize,
    /// Split.
    pub split: Split,
}

/// Samples plus the names their indices refer to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Rows.
    pub samples: Vec<SampleMeta>,
    /// Class names by index.
    pub class_names: Vec<String>,
    /// Spurious attribute names by index.
    pub spurious_names: Vec<String>,
}

impl DatasetManifest {
    /// Build and validate a manifest.
    pub fn new(
        samples: Vec<SampleMeta>,
        class_names: Vec<String>,
        spurious_names: Vec<String>,
    ) -> Result<Self> {
        let m = Self {
            samples,
            class_names,
            spurious_names,
        };
        m.validate()?;
        Ok(m)
    }

    /// Every class/spurious index must refer to a name.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if s.class_index >= self.class_names.len() {
                return Err(Error::InvalidInput(format!(
                    "sample {}: class index {} out of range ({} classes)",
                    s.sample_id,
                    s.class_index,
                    self.class_names.len()
                )));
            }
            if s.spurious_index >= self.spurious_names.len() {
                return Err(Error::InvalidInput(format!(
                    "sample {}: spurious index {} out of range ({} attributes)",
                    s.sample_id,
                    s.spurious_index,
                    self.spurious_names.len()
                )));
            }
        }
        Ok(())
    }

    /// Keep only the rows matching `keep`.
    pub fn filtered(&self, keep: impl Fn(&SampleMeta) -> bool) -> Self {
        Self {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            class_names: self.class_names.clone(),
            spurious_names: self.spurious_names.clone(),
        }
    }

    /// Rows reordered to follow `sample_ids`; every id must be present.
    pub fn aligned_to<S: AsRef<str>>(&self, sample_ids: &[S]) -> Result<Self> {
        let index: std::collections::HashMap<&str, &SampleMeta> = self
            .samples
            .iter()
            .map(|s| (s.sample_id.as_str(), s))
            .collect();
        let samples = sample_ids
            .iter()
            .map(|id| {
                index.get(id.as_ref()).map(|s| (*s).clone()).ok_or_else(|| {
                    Error::InvalidInput(format!("sample {:?} missing from manifest", id.as_ref()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            class_names: self.class_names.clone(),
            spurious_names: self.spurious_names.clone(),
        })
    }

    /// Write the delimited-text form.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = format!(
            "#classes={}\n#spurious={}\n",
            self.class_names.join("|"),
            self.spurious_names.join("|")
        );
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let delimited = |e: csv::Error| Error::Delimited {
            path: path.into(),
            reason: e.to_string(),
        };
        w.write_record(["sample_id", "class_index", "spurious_index", "split"])
            .map_err(delimited)?;
        for s in &self.samples {
            w.write_record([
                s.sample_id.clone(),
                s.class_index.to_string(),
                s.spurious_index.to_string(),
                s.split.to_string(),
            ])
            .map_err(delimited)?;
        }
        let body = w.into_inner().map_err(|e| Error::Delimited {
            path: path.into(),
            reason: e.to_string(),
        })?;
        text.push_str(&String::from_utf8_lossy(&body));
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Read the delimited-text form.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Delimited {
            path: path.into(),
            reason,
        };
        let mut class_names = None;
        let mut spurious_names = None;
        for line in text.lines().filter(|l| l.starts_with('#')) {
            let split_names = |v: &str| {
                v.split('|')
                    .map(|s| s.trim().to_string())
                    .collect::<Vec<_>>()
            };
            if let Some(v) = line.strip_prefix("#classes=") {
                class_names = Some(split_names(v));
            } else if let Some(v) = line.strip_prefix("#spurious=") {
                spurious_names = Some(split_names(v));
            }
        }
        let class_names = class_names.ok_or_else(|| bad("missing #classes= header".into()))?;
        let spurious_names =
            spurious_names.ok_or_else(|| bad("missing #spurious= header".into()))?;

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut samples = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            if row.len() != 4 {
                return Err(bad(format!(
                    "row {}: expected 4 fields, found {}",
                    i + 1,
                    row.len()
                )));
            }
            let parse = |j: usize| {
                row[j]
                    .parse::<usize>()
                    .map_err(|e| bad(format!("row {}: field {j}: {e}", i + 1)))
            };
            samples.push(SampleMeta {
                sample_id: row[0].to_string(),
                class_index: parse(1)?,
                spurious_index: parse(2)?,
                split: row[3].parse()?,
            });
        }
        Self::new(samples, class_names, spurious_names)
    }
}
