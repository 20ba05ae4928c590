// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Patches;
use crate::error::{Error, Result};

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Wrap a row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        crate::tensor::check_len("matrix", data.len(), rows * cols)?;
        Ok(Self { rows, cols, data })
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (cols as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| scale * gauss(rng))
            .collect::<Vec<f64>>();
        Self { rows, cols, data }
    }

    /// Number of rows.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of columns.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major values.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Entry `(r, c)`.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Set entry `(r, c)`.
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    /// Per-channel gain.
    pub gain: Vec<f64>,
    /// Per-channel bias.
    pub bias: Vec<f64>,
    /// When false the mean/variance normalization is bypassed and the layer
    /// is just `x ⊙ gain + bias`.
    pub normalize: bool,
    /// Variance epsilon.
    pub eps: f64,
}

/// Default layernorm epsilon.
pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    /// Unit gain, zero bias.
    pub fn identity(dim: usize, normalize: bool) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
            normalize,
            eps: LN_EPS,
        }
    }

    fn stats(&self, x: &[f64]) -> (f64, f64) {
        if !self.normalize {
            return (0.0, 1.0);
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, 1.0 / (var + self.eps).sqrt())
    }

    /// Normalize `x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (mean, inv_std) = self.stats(x);
        x.iter()
            .zip(&self.gain)
            .zip(&self.bias)
            .map(|((v, g), b)| (v - mean) * inv_std * g + b)
            .collect()
    }

    /// Fix the statistics of `x` so the layer becomes an affine map.
    pub fn freeze(&self, x: &[f64]) -> FrozenNorm<'_> {
        let (_, inv_std) = self.stats(x);
        FrozenNorm {
            norm: self,
            inv_std,
        }
    }
}

/// A [`LayerNorm`] with statistics fixed from one input.
///
/// `apply(x) = linear(x) + offset()` whenever the statistics came from `x`,
/// and `linear` is additive, so any split of `x` into terms maps to a split
/// of the output.
#[derive(Debug, Clone, Copy)]
pub struct FrozenNorm<'a> {
    norm: &'a LayerNorm,
    inv_std: f64,
}

impl FrozenNorm<'_> {
    /// Linear part: centre `v` by its own mean, scale, apply gain.
    pub fn linear(&self, v: &[f64]) -> Vec<f64> {
        let mean = if self.norm.normalize {
            v.iter().sum::<f64>() / v.len() as f64
        } else {
            0.0
        };
        v.iter()
            .zip(&self.norm.gain)
            .map(|(x, g)| (x - mean) * self.inv_std * g)
            .collect()
    }

    /// Constant part (the bias).
    pub fn offset(&self) -> Vec<f64> {
        self.norm.bias.clone()
    }
}

/// Weights of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// Query map `[d_head, d_model]`.
    pub q: Matrix,
    /// Key map `[d_head, d_model]`.
    pub k: Matrix,
    /// Value map `[d_head, d_model]`.
    pub v: Matrix,
    /// This head's slice of the output map `[d_model, d_head]`.
    pub o: Matrix,
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// Pre-attention norm.
    pub ln1: LayerNorm,
    /// Attention heads.
    pub heads: Vec<HeadWeights>,
    /// Pre-MLP norm.
    pub ln2: LayerNorm,
    /// MLP input map `[d_ff, d_model]`.
    pub mlp_in: Matrix,
    /// MLP output map `[d_model, d_ff]`.
    pub mlp_out: Matrix,
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Layers.
    pub n_layers: usize,
    /// Heads per layer.
    pub n_heads: usize,
    /// Residual width.
    pub d_model: usize,
    /// MLP hidden width.
    pub d_ff: usize,
    /// Flattened patch width.
    pub patch_dim: usize,
    /// Joint embedding width after projection.
    pub joint_dim: usize,
    /// Whether layernorms normalize (false bypasses mean/variance).
    pub layer_norm: bool,
}

impl ViTConfig {
    /// `d_model / n_heads`.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Check dims are positive and `d_model` splits evenly across heads.
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_ff,
            self.patch_dim,
            self.joint_dim,
        ];
        if all.contains(&0) {
            return Err(Error::InvalidInput(
                "ViT dimensions must be at least 1".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidInput(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Full encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights {
    pub(crate) config: ViTConfig,
    /// Patch embedding `[d_model, patch_dim]`.
    pub patch_embed: Matrix,
    /// Learned CLS token `[d_model]`.
    pub cls_token: Vec<f64>,
    /// Transformer blocks.
    pub layers: Vec<LayerWeights>,
    /// Final norm.
    pub ln_f: LayerNorm,
    /// Image projection `[joint_dim, d_model]`.
    pub proj: Matrix,
}

impl ViTWeights {
    /// Every matrix zero, every norm identity.
    pub fn zeros(config: ViTConfig) -> Self {
        let (dm, dh, ff) = (config.d_model, config.head_dim(), config.d_ff);
        let ln = LayerNorm::identity(dm, config.layer_norm);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1: ln.clone(),
                heads: (0..config.n_heads)
                    .map(|_| HeadWeights {
                        q: Matrix::zeros(dh, dm),
                        k: Matrix::zeros(dh, dm),
                        v: Matrix::zeros(dh, dm),
                        o: Matrix::zeros(dm, dh),
                    })
                    .collect(),
                ln2: ln.clone(),
                mlp_in: Matrix::zeros(ff, dm),
                mlp_out: Matrix::zeros(dm, ff),
            })
            .collect();
        Self {
            config,
            patch_embed: Matrix::zeros(dm, config.patch_dim),
            cls_token: vec![0.0; dm],
            layers,
            ln_f: ln,
            proj: Matrix::zeros(config.joint_dim, dm),
        }
    }

    /// Gaussian weights scaled by `1/√fan_in`, norms near identity.
    pub fn random(config: ViTConfig, rng: &mut impl Rng) -> Self {
        let (dm, dh, ff) = (config.d_model, config.head_dim(), config.d_ff);
        let ln = |rng: &mut dyn rand::RngCore| {
            let mut n = LayerNorm::identity(dm, config.layer_norm);
            for g in &mut n.gain {
                *g += 0.1 * gauss(rng);
            }
            for b in &mut n.bias {
                *b = 0.1 * gauss(rng);
            }
            n
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1: ln(&mut *rng),
                heads: (0..config.n_heads)
                    .map(|_| HeadWeights {
                        q: Matrix::random(dh, dm, rng),
                        k: Matrix::random(dh, dm, rng),
                        v: Matrix::random(dh, dm, rng),
                        o: Matrix::random(dm, dh, rng),
                    })
                    .collect(),
                ln2: ln(&mut *rng),
                mlp_in: Matrix::random(ff, dm, rng),
                mlp_out: Matrix::random(dm, ff, rng),
            })
            .collect();
        let ln_f = ln(&mut *rng);
        Self {
            config,
            patch_embed: Matrix::random(dm, config.patch_dim, rng),
            cls_token: (0..dm).map(|_| gauss(rng)).collect(),
            layers,
            ln_f,
            proj: Matrix::random(config.joint_dim, dm, rng),
        }
    }

    /// Architecture.
    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    /// Check shapes and finiteness of every tensor.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (dm, dh, ff) = (c.d_model, c.head_dim(), c.d_ff);
        let shape = |name: &str, m: &Matrix, r: usize, cc: usize| -> Result<()> {
            if m.rows() != r || m.cols() != cc {
                return Err(Error::Dimension(format!(
                    "{name}: expected [{r}, {cc}], found [{}, {}]",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "{name} has non-finite entries"
                )));
            }
            Ok(())
        };
        let norm = |name: &str, n: &LayerNorm| -> Result<()> {
            if n.gain.len() != dm || n.bias.len() != dm {
                return Err(Error::Dimension(format!("{name}: expected width {dm}")));
            }
            Ok(())
        };
        shape("patch_embed", &self.patch_embed, dm, c.patch_dim)?;
        shape("proj", &self.proj, c.joint_dim, dm)?;
        crate::tensor::check_len("cls_token", self.cls_token.len(), dm)?;
        norm("ln_f", &self.ln_f)?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Dimension(format!("expected {} layers", c.n_layers)));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            norm(&format!("layer {l} ln1"), &layer.ln1)?;
            norm(&format!("layer {l} ln2"), &layer.ln2)?;
            shape(&format!("layer {l} mlp.in"), &layer.mlp_in, ff, dm)?;
            shape(&format!("layer {l} mlp.out"), &layer.mlp_out, dm, ff)?;
            if layer.heads.len() != c.n_heads {
                return Err(Error::Dimension(format!(
                    "layer {l}: expected {} heads",
                    c.n_heads
                )));
            }
            for (h, head) in layer.heads.iter().enumerate() {
                shape(&format!("layer {l} head {h} q"), &head.q, dh, dm)?;
                shape(&format!("layer {l} head {h} k"), &head.k, dh, dm)?;
                shape(&format!("layer {l} head {h} v"), &head.v, dh, dm)?;
                shape(&format!("layer {l} head {h} o"), &head.o, dm, dh)?;
            }
        }
        Ok(())
    }

    pub(crate) fn check_patches(&self, patches: &Patches) -> Result<()> {
        if patches.patch_dim != self.config.patch_dim {
            return Err(Error::Dimension(format!(
                "patch width {} does not match weights ({})",
                patches.patch_dim, self.config.patch_dim
            )));
        }
        if patches.n == 0 {
            return Err(Error::InvalidInput("at least one patch is required".into()));
        }
        Ok(())
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

impl Patches {
    /// Standard-normal patches.
    pub fn random(n: usize, patch_dim: usize, rng: &mut impl Rng) -> Self {
        let data = (0..n * patch_dim).map(|_| gauss(rng) as f32).collect();
        Self { n, patch_dim, data }
    }
}
