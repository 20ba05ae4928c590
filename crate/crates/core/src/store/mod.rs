// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk formats for decomposed activations, text banks and dataset
//! manifests.
//!
//! An activation store is a directory holding `manifest.json` and one packed
//! little-endian `float32` file per tensor field:
//!
//! | file               | shape                     |
//! |--------------------|---------------------------|
//! | `contributions.bin`| `[M, L, H, d]`            |
//! | `residual.bin`     | `[M, d]`                  |
//! | `embedding.bin`    | `[M, d]`                  |
//! | `tokens.bin`       | `[M, L, H, N + 1, d]` (optional) |
//!
//! Records are always written sorted by `sample_id`.

pub mod blob;
pub mod dataset;
pub mod text_bank;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_len, HeadTensor, TokenTensor};

pub use dataset::{DatasetManifest, SampleMeta, Split};
pub use text_bank::{BankKind, TextBank};

/// Name of the store manifest file.
pub const MANIFEST_FILE: &str = "manifest.json";
/// Default relative tolerance for the reconstruction invariant.
pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-4;

/// Model dimensions shared by every record in a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of transformer layers `L`.
    pub n_layers: usize,
    /// Attention heads per layer `H`.
    pub n_heads: usize,
    /// Patch tokens `N`, excluding CLS.
    pub n_tokens: usize,
    /// Residual width `d_model`.
    pub embed_dim: usize,
    /// Joint image/text embedding width `d`.
    pub joint_dim: usize,
}

impl ModelSpec {
    /// Check every dimension is positive and `embed_dim` splits across heads.
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_tokens", self.n_tokens),
            ("embed_dim", self.embed_dim),
            ("joint_dim", self.joint_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidInput(format!(
                    "model spec: {name} must be at least 1"
                )));
            }
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidInput(format!(
                "model spec: embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Per-head width `embed_dim / n_heads`.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// Decomposed activations of one image, already in joint embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    /// Unique identifier.
    pub sample_id: String,
    /// Per-head CLS contributions, `[L, H, d]`.
    pub contributions: HeadTensor,
    /// Optional per-token split of `contributions`, `[L, H, N + 1, d]`.
    pub token_contributions: Option<TokenTensor>,
    /// Everything outside the attention heads (embedding, MLPs, norm offsets).
    pub residual_base: Vec<f32>,
    /// The image embedding.
    pub full_embedding: Vec<f32>,
}

impl ActivationRecord {
    /// Joint embedding width.
    pub fn dim(&self) -> usize {
        self.full_embedding.len()
    }

    /// `Σ contributions + residual_base`, accumulated in `f64`.
    pub fn reconstructed(&self) -> Vec<f64> {
        let mut acc = self.contributions.sum_heads();
        for (a, &r) in acc.iter_mut().zip(&self.residual_base) {
            *a += f64::from(r);
        }
        acc
    }

    /// Relative reconstruction error against `full_embedding`.
    pub fn reconstruction_error(&self) -> f64 {
        let rec = self.reconstructed();
        let mut diff = 0.0;
        let mut base = 0.0;
        for (r, &f) in rec.iter().zip(&self.full_embedding) {
            let f = f64::from(f);
            diff += (r - f) * (r - f);
            base += f * f;
        }
        relative(diff.sqrt(), base.sqrt())
    }

    /// Relative error between the token-summed tensor and `contributions`.
    pub fn token_sum_error(&self) -> Option<f64> {
        let tokens = self.token_contributions.as_ref()?;
        let mut diff = 0.0;
        let mut base = 0.0;
        for (pos, state) in self.contributions.iter() {
            let mut acc = vec![0.0f64; state.len()];
            for t in 0..tokens.tokens() {
                for (a, &x) in acc.iter_mut().zip(tokens.get(pos, t)) {
                    *a += f64::from(x);
                }
            }
            for (a, &c) in acc.iter().zip(state) {
                let c = f64::from(c);
                diff += (a - c) * (a - c);
                base += c * c;
            }
        }
        Some(relative(diff.sqrt(), base.sqrt()))
    }

    /// Check the record's shapes against `spec`.
    pub fn check_dims(&self, spec: &ModelSpec) -> Result<()> {
        let c = &self.contributions;
        if (c.layers(), c.heads(), c.dim()) != (spec.n_layers, spec.n_heads, spec.joint_dim) {
            return Err(Error::Dimension(format!(
                "record {}: contributions are [{}, {}, {}], spec wants [{}, {}, {}]",
                self.sample_id,
                c.layers(),
                c.heads(),
                c.dim(),
                spec.n_layers,
                spec.n_heads,
                spec.joint_dim
            )));
        }
        check_len("residual_base", self.residual_base.len(), spec.joint_dim)?;
        check_len("full_embedding", self.full_embedding.len(), spec.joint_dim)?;
        if let Some(t) = &self.token_contributions {
            let want = (
                spec.n_layers,
                spec.n_heads,
                spec.n_tokens + 1,
                spec.joint_dim,
            );
            if (t.layers(), t.heads(), t.tokens(), t.dim()) != want {
                return Err(Error::Dimension(format!(
                    "record {}: token contributions have wrong shape",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }
}

fn relative(err: f64, base: f64) -> f64 {
    if base > 0.0 {
        err / base
    } else {
        err
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreManifest {
    schema_version: u32,
    model_spec: ModelSpec,
    sample_ids: Vec<String>,
    dtype: String,
    byte_order: String,
    layout: String,
    tensor_files: BTreeMap<String, String>,
    shapes: BTreeMap<String, Vec<usize>>,
    checksums: BTreeMap<String, String>,
}

const CONTRIBUTIONS: &str = "contributions";
const RESIDUAL: &str = "residual";
const EMBEDDING: &str = "embedding";
const TOKENS: &str = "tokens";

/// Write `records` into the directory `path`, sorted by `sample_id`.
pub fn write_store(records: &[ActivationRecord], spec: &ModelSpec, path: &Path) -> Result<()> {
    spec.validate()?;
    let mut seen = HashSet::new();
    for r in records {
        r.check_dims(spec)?;
        if !seen.insert(r.sample_id.as_str()) {
            return Err(Error::InvalidInput(format!(
                "duplicate sample_id {:?}",
                r.sample_id
            )));
        }
    }
    let with_tokens = records
        .first()
        .is_some_and(|r| r.token_contributions.is_some());
    if records
        .iter()
        .any(|r| r.token_contributions.is_some() != with_tokens)
    {
        return Err(Error::Dimension(
            "token contributions must be present on all records or on none".into(),
        ));
    }

    let mut order: Vec<&ActivationRecord> = records.iter().collect();
    order.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let m = order.len();
    let (l, h, n, d) = (
        spec.n_layers,
        spec.n_heads,
        spec.n_tokens + 1,
        spec.joint_dim,
    );

    let mut fields: Vec<(&str, Vec<usize>, Vec<f32>)> = vec![
        (
            CONTRIBUTIONS,
            vec![m, l, h, d],
            order
                .iter()
                .flat_map(|r| r.contributions.as_slice().iter().copied())
                .collect(),
        ),
        (
            RESIDUAL,
            vec![m, d],
            order
                .iter()
                .flat_map(|r| r.residual_base.iter().copied())
                .collect(),
        ),
        (
            EMBEDDING,
            vec![m, d],
            order
                .iter()
                .flat_map(|r| r.full_embedding.iter().copied())
                .collect(),
        ),
    ];
    if with_tokens {
        fields.push((
            TOKENS,
            vec![m, l, h, n, d],
            order
                .iter()
                .flat_map(|r| {
                    r.token_contributions
                        .as_ref()
                        .map(|t| t.as_slice())
                        .unwrap_or(&[])
                        .iter()
                        .copied()
                })
                .collect(),
        ));
    }

    let mut tensor_files = BTreeMap::new();
    let mut shapes = BTreeMap::new();
    let mut checksums = BTreeMap::new();
    for (name, shape, data) in fields {
        let file = format!("{name}.bin");
        let sha = blob::write_f32(&path.join(&file), &data)?;
        tensor_files.insert(name.to_string(), file);
        shapes.insert(name.to_string(), shape);
        checksums.insert(name.to_string(), sha);
    }

    let manifest = StoreManifest {
        schema_version: blob::SCHEMA_VERSION,
        model_spec: *spec,
        sample_ids: order.iter().map(|r| r.sample_id.clone()).collect(),
        dtype: blob::DTYPE.into(),
        byte_order: blob::BYTE_ORDER.into(),
        layout: "row-major".into(),
        tensor_files,
        shapes,
        checksums,
    };
    blob::write_json(&path.join(MANIFEST_FILE), &manifest)
}

/// How [`read_store`] treats reconstruction-invariant violations.
#[derive(Debug, Clone, Copy)]
pub struct ReadOptions {
    /// Relative tolerance for both invariants.
    pub tolerance: f64,
    /// Fail instead of reporting.
    pub strict: bool,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self {
            tolerance: RECONSTRUCTION_TOLERANCE,
            strict: false,
        }
    }
}

/// Which invariant a record broke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Contributions plus residual do not add up to the embedding.
    Reconstruction,
    /// Token contributions do not add up to the head contributions.
    TokenSum,
}

/// A record that failed an invariant check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Record identifier.
    pub sample_id: String,
    /// Which invariant.
    pub kind: ViolationKind,
    /// Measured relative error.
    pub relative_error: f64,
}

/// Contents of a store directory.
#[derive(Debug, Clone)]
pub struct LoadedStore {
    /// Model dimensions.
    pub spec: ModelSpec,
    /// Records in manifest order.
    pub records: Vec<ActivationRecord>,
    /// Invariant violations found while loading (empty in strict mode).
    pub violations: Vec<Violation>,
}

/// Check both invariants on every record.
pub fn check_records(records: &[ActivationRecord], tolerance: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    for r in records {
        let e = r.reconstruction_error();
        if e.is_nan() || e > tolerance {
            out.push(Violation {
                sample_id: r.sample_id.clone(),
                kind: ViolationKind::Reconstruction,
                relative_error: e,
            });
        }
        if let Some(e) = r.token_sum_error() {
            if e.is_nan() || e > tolerance {
                out.push(Violation {
                    sample_id: r.sample_id.clone(),
                    kind: ViolationKind::TokenSum,
                    relative_error: e,
                });
            }
        }
    }
    out
}

/// Read a store directory written by [`write_store`] (or the export adapter).
pub fn read_store(path: &Path, opts: ReadOptions) -> Result<LoadedStore> {
    let manifest_path = path.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::corrupt(path, "missing manifest.json"));
    }
    let manifest: StoreManifest = blob::read_json(&manifest_path)?;
    if manifest.schema_version != blob::SCHEMA_VERSION {
        return Err(Error::corrupt(
            &manifest_path,
            format!("unsupported schema_version {}", manifest.schema_version),
        ));
    }
    blob::check_encoding(&manifest_path, &manifest.dtype, &manifest.byte_order)?;
    if manifest.layout != "row-major" {
        return Err(Error::corrupt(
            &manifest_path,
            format!("unsupported layout {:?}", manifest.layout),
        ));
    }
    let spec = manifest.model_spec;
    spec.validate()?;
    let m = manifest.sample_ids.len();
    let (l, h, n, d) = (
        spec.n_layers,
        spec.n_heads,
        spec.n_tokens + 1,
        spec.joint_dim,
    );

    let load = |name: &str, shape: Vec<usize>| -> Result<Option<Vec<f32>>> {
        let Some(file) = manifest.tensor_files.get(name) else {
            return Ok(None);
        };
        if let Some(declared) = manifest.shapes.get(name) {
            if *declared != shape {
                return Err(Error::corrupt(
                    &manifest_path,
                    format!("field {name}: declared shape {declared:?}, expected {shape:?}"),
                ));
            }
        }
        let numel = shape.iter().product();
        let sha = manifest.checksums.get(name).map(String::as_str);
        blob::read_f32(&path.join(file), numel, sha).map(Some)
    };

    let missing =
        |name: &str| Error::corrupt(&manifest_path, format!("missing tensor field {name:?}"));
    let contributions =
        load(CONTRIBUTIONS, vec![m, l, h, d])?.ok_or_else(|| missing(CONTRIBUTIONS))?;
    let residual = load(RESIDUAL, vec![m, d])?.ok_or_else(|| missing(RESIDUAL))?;
    let embedding = load(EMBEDDING, vec![m, d])?.ok_or_else(|| missing(EMBEDDING))?;
    let tokens = load(TOKENS, vec![m, l, h, n, d])?;

    let per_c = l * h * d;
    let per_t = l * h * n * d;
    let mut records = Vec::with_capacity(m);
    for (i, id) in manifest.sample_ids.iter().enumerate() {
        let token_contributions = match &tokens {
            Some(t) => Some(TokenTensor::from_vec(
                l,
                h,
                n,
                d,
                t[i * per_t..(i + 1) * per_t].to_vec(),
            )?),
            None => None,
        };
        records.push(ActivationRecord {
            sample_id: id.clone(),
            contributions: HeadTensor::from_vec(
                l,
                h,
                d,
                contributions[i * per_c..(i + 1) * per_c].to_vec(),
            )?,
            token_contributions,
            residual_base: residual[i * d..(i + 1) * d].to_vec(),
            full_embedding: embedding[i * d..(i + 1) * d].to_vec(),
        });
    }

    let violations = check_records(&records, opts.tolerance);
    if let Some(v) = violations.first() {
        if opts.strict {
            return Err(Error::Reconstruction {
                sample_id: v.sample_id.clone(),
                relative_error: v.relative_error,
            });
        }
        for v in &violations {
            log::warn!(
                "{}: {:?} invariant violated (relative error {:.3e})",
                v.sample_id,
                v.kind,
                v.relative_error
            );
        }
    }
    Ok(LoadedStore {
        spec,
        records,
        violations,
    })
}
