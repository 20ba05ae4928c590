// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spatial heatmaps of head-set contributions and Shapley attributions of
//! caption tokens against a head-set state.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::locate::HeadSet;
use crate::store::blob::{self, BYTE_ORDER, DTYPE, SCHEMA_VERSION};
use crate::store::ActivationRecord;
use crate::tensor::check_len;

/// Which heads a heatmap or attribution is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    /// Heads associating the spurious attribute with a class.
    #[serde(rename = "z_sy")]
    Association,
    /// Class heads.
    #[serde(rename = "z_y")]
    Target,
    /// Spurious heads.
    #[serde(rename = "z_s")]
    Spurious,
    /// Every head.
    Full,
}

/// Per-patch logit contribution of a head set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Record identifier.
    pub sample_id: String,
    /// Grid side when the patch count is a perfect square.
    pub side: Option<usize>,
    /// One value per patch (CLS excluded), row-major.
    pub values: Vec<f64>,
    /// Head set the map was built from.
    pub kind: StateKind,
}

impl Heatmap {
    /// Comma-separated rows (one row when the patch count is not square).
    pub fn to_csv(&self) -> String {
        let width = self.side.unwrap_or(self.values.len().max(1));
        let mut out = String::new();
        for row in self.values.chunks(width) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    /// Binary 8-bit grayscale image, min-max scaled.
    pub fn to_pgm(&self) -> Vec<u8> {
        let width = self.side.unwrap_or(self.values.len().max(1));
        let height = self.values.len().div_ceil(width);
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
        out.extend(
            self.values
                .iter()
                .map(|&v| (((v - lo) / span) * 255.0).round() as u8),
        );
        out
    }
}

/// `⟨Σ_{(l,h) ∈ heads} token_state[l, h, i], text⟩` for every patch `i`.
pub fn spatial_heatmap(
    record: &ActivationRecord,
    heads: &HeadSet,
    text: &[f32],
    kind: StateKind,
) -> Result<Heatmap> {
    let tokens = record.token_contributions.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!(
            "record {} has no token contributions",
            record.sample_id
        ))
    })?;
    heads.check_bounds(tokens.layers(), tokens.heads())?;
    check_len("text embedding", text.len(), tokens.dim())?;
    let n = tokens.tokens() - 1;
    let values: Vec<f64> = (1..=n)
        .map(|t| {
            heads
                .positions
                .iter()
                .map(|&p| crate::tensor::dot(tokens.get(p, t), text))
                .sum()
        })
        .collect();
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "heatmap value at patch {bad} is not finite"
        )));
    }
    let side = (n as f64).sqrt().round() as usize;
    Ok(Heatmap {
        sample_id: record.sample_id.clone(),
        side: (side * side == n && n > 0).then_some(side),
        values,
        kind,
    })
}

/// Sum of the states at `heads`.
pub fn head_state_sum(record: &ActivationRecord, heads: &HeadSet) -> Result<Vec<f64>> {
    let c = &record.contributions;
    heads.check_bounds(c.layers(), c.heads())?;
    let mut acc = vec![0.0; c.dim()];
    for &p in &heads.positions {
        acc.iter_mut()
            .zip(c.get(p))
            .for_each(|(a, &x)| *a += f64::from(x));
    }
    Ok(acc)
}

/// Embeddings of a caption restricted to token subsets. Bit `i` of the mask
/// keeps token `i`.
pub trait EmbeddingProvider {
    /// Caption length.
    fn n_tokens(&self) -> usize;
    /// Embedding width.
    fn dim(&self) -> usize;
    /// Embedding of the caption keeping the tokens in `mask`.
    fn embed(&self, mask: u64) -> Result<Vec<f64>>;
}

/// Provider whose embedding of a subset is the sum of per-token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProvider {
    /// One vector per token.
    pub token_vectors: Vec<Vec<f64>>,
}

impl EmbeddingProvider for LinearProvider {
    fn n_tokens(&self) -> usize {
        self.token_vectors.len()
    }

    fn dim(&self) -> usize {
        self.token_vectors.first().map_or(0, Vec::len)
    }

    fn embed(&self, mask: u64) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim()];
        for (i, v) in self.token_vectors.iter().enumerate() {
            if mask >> i & 1 == 1 {
                acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
            }
        }
        Ok(acc)
    }
}

#[derive(Serialize, Deserialize)]
struct TableManifest {
    schema_version: u32,
    kind: String,
    tokens: Vec<String>,
    dim: usize,
    dtype: String,
    byte_order: String,
    /// Hex mask → row in the blob.
    masks: BTreeMap<String, usize>,
    tensor_file: String,
    sha256: String,
}

/// Precomputed subset embeddings stored as a manifest plus a packed blob.
#[derive(Debug, Clone, PartialEq)]
pub struct TableProvider {
    tokens: Vec<String>,
    dim: usize,
    rows: HashMap<u64, usize>,
    data: Vec<f32>,
}

fn parse_mask(hex: &str) -> Result<u64> {
    let digits = hex.trim_start_matches("0x");
    u64::from_str_radix(digits, 16).map_err(|_| Error::InvalidInput(format!("bad mask {hex:?}")))
}

impl TableProvider {
    /// Build from `(mask, embedding)` entries.
    pub fn new(tokens: Vec<String>, entries: Vec<(u64, Vec<f32>)>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.1.len());
        let mut rows = HashMap::new();
        let mut data = Vec::with_capacity(entries.len() * dim);
        for (i, (mask, v)) in entries.into_iter().enumerate() {
            check_len("subset embedding", v.len(), dim)?;
            if tokens.len() < 64 && mask >> tokens.len() != 0 {
                return Err(Error::InvalidInput(format!(
                    "mask {mask:#x} has bits beyond {} tokens",
                    tokens.len()
                )));
            }
            if rows.insert(mask, i).is_some() {
                return Err(Error::InvalidInput(format!("mask {mask:#x} listed twice")));
            }
            data.extend(v);
        }
        Ok(Self {
            tokens,
            dim,
            rows,
            data,
        })
    }

    /// Caption tokens.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Write `<path>` (manifest) and a sibling `.bin` blob.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bin = path.with_extension("bin");
        let sha = blob::write_f32(&bin, &self.data)?;
        let masks = self
            .rows
            .iter()
            .map(|(&m, &r)| (format!("{m:x}"), r))
            .collect();
        let manifest = TableManifest {
            schema_version: SCHEMA_VERSION,
            kind: "caption_subset".into(),
            tokens: self.tokens.clone(),
            dim: self.dim,
            dtype: DTYPE.into(),
            byte_order: BYTE_ORDER.into(),
            masks,
            tensor_file: bin
                .file_name()
                .expect("bin path")
                .to_string_lossy()
                .into_owned(),
            sha256: sha,
        };
        blob::write_json(path, &manifest)
    }

    /// Read a table written by [`write`](Self::write).
    pub fn read(path: &Path) -> Result<Self> {
        let m: TableManifest = blob::read_json(path)?;
        blob::check_encoding(path, &m.dtype, &m.byte_order)?;
        let bin = path.parent().unwrap_or(Path::new(".")).join(&m.tensor_file);
        let data = blob::read_f32(&bin, m.masks.len() * m.dim, Some(&m.sha256))?;
        let mut rows = HashMap::new();
        for (hex, row) in &m.masks {
            if *row >= m.masks.len() {
                return Err(Error::corrupt(
                    path,
                    format!("mask {hex} points past the blob"),
                ));
            }
            rows.insert(parse_mask(hex)?, *row);
        }
        Ok(Self {
            tokens: m.tokens,
            dim: m.dim,
            rows,
            data,
        })
    }
}

impl EmbeddingProvider for TableProvider {
    fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, mask: u64) -> Result<Vec<f64>> {
        let row = *self.rows.get(&mask).ok_or_else(|| {
            Error::InvalidInput(format!("no embedding for token subset {mask:#x}"))
        })?;
        Ok(self.data[row * self.dim..(row + 1) * self.dim]
            .iter()
            .map(|&x| f64::from(x))
            .collect())
    }
}

/// Shapley estimator choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMethod {
    /// Exact up to [`EXACT_TOKEN_LIMIT`] tokens, sampled beyond.
    Auto,
    /// Full subset enumeration.
    Exact,
    /// Seeded permutation sampling.
    Sampled,
}

/// Largest caption enumerated exactly under [`ShapleyMethod::Auto`].
pub const EXACT_TOKEN_LIMIT: usize = 10;
/// Hard limit for [`ShapleyMethod::Exact`].
pub const MAX_EXACT_TOKENS: usize = 20;

/// Shapley values of caption tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    /// Record identifier.
    pub sample_id: String,
    /// Caption tokens (may be empty when unknown).
    pub caption_tokens: Vec<String>,
    /// One value per token.
    pub phi: Vec<f64>,
    /// Head set the state came from.
    pub kind: StateKind,
    /// Permutations drawn; 0 for exact enumeration.
    pub n_permutations: usize,
    /// Base seed.
    pub seed: u64,
    /// Value of the full caption.
    pub value_full: f64,
    /// Value of the empty caption.
    pub value_empty: f64,
}

/// Per-sample seed derived from the base seed and the sample identifier.
pub fn derive_seed(seed: u64, sample_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Options for [`shapley_text`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapleyOptions {
    /// Estimator.
    pub method: ShapleyMethod,
    /// Permutations for the sampled estimator (≥ 1).
    pub n_permutations: usize,
    /// Base seed.
    pub seed: u64,
}

impl Default for ShapleyOptions {
    fn default() -> Self {
        Self {
            method: ShapleyMethod::Auto,
            n_permutations: 2000,
            seed: 0,
        }
    }
}

/// Shapley values of `v(mask) = ⟨state, provider(mask)⟩`.
pub fn shapley_text(
    sample_id: &str,
    state: &[f64],
    provider: &dyn EmbeddingProvider,
    kind: StateKind,
    opts: ShapleyOptions,
) -> Result<TokenAttribution> {
    let n = provider.n_tokens();
    if n > 63 {
        return Err(Error::InvalidInput(format!(
            "captions are limited to 63 tokens, got {n}"
        )));
    }
    check_len("state", state.len(), provider.dim())?;
    let cache: RefCell<HashMap<u64, f64>> = RefCell::new(HashMap::new());
    let value = |mask: u64| -> Result<f64> {
        if let Some(&v) = cache.borrow().get(&mask) {
            return Ok(v);
        }
        let e = provider.embed(mask)?;
        check_len("subset embedding", e.len(), state.len())?;
        let v: f64 = e.iter().zip(state).map(|(a, b)| a * b).sum();
        cache.borrow_mut().insert(mask, v);
        Ok(v)
    };
    let full = if n == 0 { 0 } else { (1u64 << n) - 1 };
    let exact = match opts.method {
        ShapleyMethod::Exact => {
            if n > MAX_EXACT_TOKENS {
                return Err(Error::InvalidInput(format!(
                    "exact enumeration is limited to {MAX_EXACT_TOKENS} tokens"
                )));
            }
            true
        }
        ShapleyMethod::Auto => n <= EXACT_TOKEN_LIMIT,
        ShapleyMethod::Sampled => false,
    };
    let mut phi = vec![0.0; n];
    let n_permutations = if exact {
        // weight of a coalition of size s: s! (n − s − 1)! / n! = 1 / (n · C(n − 1, s))
        let mut binom = vec![1.0f64; n.max(1)];
        for s in 1..n {
            binom[s] = binom[s - 1] * (n - s) as f64 / s as f64;
        }
        for (i, p) in phi.iter_mut().enumerate() {
            let bit = 1u64 << i;
            for mask in 0..=full {
                if mask & bit != 0 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                *p += (value(mask | bit)? - value(mask)?) / (n as f64 * binom[s]);
            }
        }
        0
    } else {
        if opts.n_permutations == 0 {
            return Err(Error::InvalidInput("need at least one permutation".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, sample_id));
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..opts.n_permutations {
            order.shuffle(&mut rng);
            let mut mask = 0u64;
            let mut prev = value(0)?;
            for &t in &order {
                mask |= 1 << t;
                let cur = value(mask)?;
                phi[t] += cur - prev;
                prev = cur;
            }
        }
        phi.iter_mut()
            .for_each(|p| *p /= opts.n_permutations as f64);
        opts.n_permutations
    };
    Ok(TokenAttribution {
        sample_id: sample_id.to_owned(),
        caption_tokens: Vec::new(),
        phi,
        kind,
        n_permutations,
        seed: opts.seed,
        value_full: value(full)?,
        value_empty: value(0)?,
    })
}

/// Annotation of a caption token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    /// Describes the class.
    #[serde(rename = "Y")]
    Class,
    /// Describes the spurious attribute.
    #[serde(rename = "S")]
    Spurious,
    /// Anything else.
    #[serde(rename = "other")]
    Other,
}

/// Mean of `phi / caption_length` within each attribute; attributes with no
/// tokens are absent.
pub fn attribute_summary(
    attribution: &TokenAttribution,
    attributes: &[Attribute],
) -> Result<BTreeMap<Attribute, f64>> {
    check_len("token attributes", attributes.len(), attribution.phi.len())?;
    let n = attribution.phi.len() as f64;
    let mut sums: BTreeMap<Attribute, (f64, usize)> = BTreeMap::new();
    for (&p, &a) in attribution.phi.iter().zip(attributes) {
        let e = sums.entry(a).or_default();
        e.0 += p / n;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(a, (s, c))| (a, s / c as f64))
        .collect())
}

/// How often each token string is the top-valued token, ties to the earlier
/// token.
pub fn top_feature_counts(attributions: &[TokenAttribution]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for a in attributions {
        let mut best: Option<usize> = None;
        for (i, &p) in a.phi.iter().enumerate() {
            if best.is_none_or(|b| p > a.phi[b]) {
                best = Some(i);
            }
        }
        if let Some(b) = best {
            let name = a
                .caption_tokens
                .get(b)
                .cloned()
                .unwrap_or_else(|| format!("#{b}"));
            *counts.entry(name).or_insert(0) += 1;
        }
    }
    counts
}
