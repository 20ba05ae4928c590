// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal pre-LN ViT image encoder whose forward pass records the residual
//! stream split into per-head, per-token direct effects.
//!
//! The CLS output of the last layer is
//!
//! ```text
//! z_L = z_0 + Σ_l Σ_h Σ_i a_i^{l,h} W_O^{l,h} W_V^{l,h} LN1(z_i^{l-1}) + Σ_l MLP_l
//! ```
//!
//! and the image embedding is `P · LN_f(z_L)`. `LN_f` is applied to every
//! term as a frozen affine map whose mean and variance come from the real
//! `z_L`, so the projected terms add up to the embedding exactly. The
//! constant `LN_f` bias lands in `residual_base` together with the projected
//! CLS embedding and the MLP terms.

mod io;
mod plain;
mod weights;

pub use io::{read_patches, read_weights, write_patches, write_weights, PatchSet};
pub use plain::forward_plain;
pub use weights::{HeadWeights, LayerNorm, LayerWeights, Matrix, ViTConfig, ViTWeights};

use crate::error::{Error, Result};
use crate::store::ActivationRecord;
use crate::tensor::{HeadTensor, TokenTensor};

/// Patch embeddings for one image, `[N, patch_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    /// Number of patches `N`.
    pub n: usize,
    /// Width of one flattened patch.
    pub patch_dim: usize,
    /// Row-major values.
    pub data: Vec<f32>,
}

impl Patches {
    /// Wrap a flat buffer.
    pub fn new(n: usize, patch_dim: usize, data: Vec<f32>) -> Result<Self> {
        crate::tensor::check_len("patches", data.len(), n * patch_dim)?;
        Ok(Self { n, patch_dim, data })
    }

    /// Row `i`.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.patch_dim..(i + 1) * self.patch_dim]
    }
}

/// Everything the decomposed forward pass records, in `d_model` space.
///
/// Token index 0 is CLS throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    /// Layers `L`.
    pub n_layers: usize,
    /// Heads per layer `H`.
    pub n_heads: usize,
    /// Tokens including CLS, `N + 1`.
    pub n_tokens: usize,
    /// Residual width.
    pub d_model: usize,
    /// `z^0 .. z^L`, each `[N + 1, d_model]`.
    pub z: Vec<Vec<f64>>,
    /// `ẑ^1 .. ẑ^L` (post-attention states), each `[N + 1, d_model]`.
    pub z_hat: Vec<Vec<f64>>,
    /// CLS-row per-token head contributions, `[L, H, N + 1, d_model]`.
    pub head_token_contributions: Vec<f64>,
    /// CLS-row MLP contributions, `[L, d_model]`.
    pub mlp_contributions: Vec<f64>,
    /// CLS-row attention weights, `[L, H, N + 1]`.
    pub attention: Vec<f64>,
}

impl ResidualTrace {
    /// Token `i`'s contribution from head `(layer, head)` to the CLS stream.
    pub fn token_contribution(&self, layer: usize, head: usize, token: usize) -> &[f64] {
        let o = ((layer * self.n_heads + head) * self.n_tokens + token) * self.d_model;
        &self.head_token_contributions[o..o + self.d_model]
    }

    /// Sum over tokens of one head's contribution.
    pub fn head_contribution(&self, layer: usize, head: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.d_model];
        for t in 0..self.n_tokens {
            for (a, x) in acc.iter_mut().zip(self.token_contribution(layer, head, t)) {
                *a += x;
            }
        }
        acc
    }

    /// CLS attention row of head `(layer, head)`.
    pub fn attention_row(&self, layer: usize, head: usize) -> &[f64] {
        let o = (layer * self.n_heads + head) * self.n_tokens;
        &self.attention[o..o + self.n_tokens]
    }

    /// CLS MLP contribution of `layer`.
    pub fn mlp_contribution(&self, layer: usize) -> &[f64] {
        &self.mlp_contributions[layer * self.d_model..(layer + 1) * self.d_model]
    }

    /// CLS row of a `[N + 1, d_model]` state.
    pub fn cls<'a>(&self, state: &'a [f64]) -> &'a [f64] {
        &state[..self.d_model]
    }
}

/// Exact (erf) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn ensure_finite(v: &[f64], layer: usize, head: usize, stage: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer, head, stage })
    }
}

/// Run the encoder on one image and return the trace plus the projected,
/// decomposed [`ActivationRecord`].
pub fn forward_decomposed(
    weights: &ViTWeights,
    patches: &Patches,
    sample_id: &str,
    with_tokens: bool,
) -> Result<(ResidualTrace, ActivationRecord)> {
    weights.check_patches(patches)?;
    let cfg = weights.config();
    let (l_count, h_count, dm, dh) = (cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.head_dim());
    let nt = patches.n + 1;

    // z^0: CLS followed by embedded patches.
    let mut z = Vec::with_capacity(nt * dm);
    z.extend_from_slice(&weights.cls_token);
    for i in 0..patches.n {
        let row: Vec<f64> = patches.row(i).iter().map(|&x| f64::from(x)).collect();
        z.extend(weights.patch_embed.matvec(&row));
    }
    ensure_finite(&z, 0, usize::MAX, "patch embedding")?;

    let mut trace = ResidualTrace {
        n_layers: l_count,
        n_heads: h_count,
        n_tokens: nt,
        d_model: dm,
        z: vec![z.clone()],
        z_hat: Vec::with_capacity(l_count),
        head_token_contributions: vec![0.0; l_count * h_count * nt * dm],
        mlp_contributions: vec![0.0; l_count * dm],
        attention: vec![0.0; l_count * h_count * nt],
    };

    let scale = 1.0 / (dh as f64).sqrt();
    for (li, layer) in weights.layers.iter().enumerate() {
        let normed: Vec<Vec<f64>> = z.chunks(dm).map(|t| layer.ln1.apply(t)).collect();
        let mut z_hat = z.clone();
        for (hi, head) in layer.heads.iter().enumerate() {
            let q: Vec<Vec<f64>> = normed.iter().map(|x| head.q.matvec(x)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|x| head.k.matvec(x)).collect();
            // W_O W_V applied to each key token; reused by every query row.
            let vo: Vec<Vec<f64>> = normed
                .iter()
                .map(|x| head.o.matvec(&head.v.matvec(x)))
                .collect();
            for query in 0..nt {
                let mut a: Vec<f64> = k
                    .iter()
                    .map(|kj| q[query].iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale)
                    .collect();
                softmax_in_place(&mut a);
                ensure_finite(&a, li, hi, "attention weights")?;
                let dst = &mut z_hat[query * dm..(query + 1) * dm];
                for (j, w) in a.iter().enumerate() {
                    for (d, x) in dst.iter_mut().zip(&vo[j]) {
                        *d += w * x;
                    }
                }
                if query == 0 {
                    let ao = (li * h_count + hi) * nt;
                    trace.attention[ao..ao + nt].copy_from_slice(&a);
                    for (j, w) in a.iter().enumerate() {
                        let o = ((li * h_count + hi) * nt + j) * dm;
                        for (d, x) in trace.head_token_contributions[o..o + dm]
                            .iter_mut()
                            .zip(&vo[j])
                        {
                            *d = w * x;
                        }
                    }
                }
            }
            ensure_finite(&z_hat, li, hi, "attention output")?;
        }

        let mut z_next = z_hat.clone();
        for t in 0..nt {
            let x = layer.ln2.apply(&z_hat[t * dm..(t + 1) * dm]);
            let hidden: Vec<f64> = layer.mlp_in.matvec(&x).into_iter().map(gelu).collect();
            let out = layer.mlp_out.matvec(&hidden);
            if t == 0 {
                trace.mlp_contributions[li * dm..(li + 1) * dm].copy_from_slice(&out);
            }
            for (d, o) in z_next[t * dm..(t + 1) * dm].iter_mut().zip(&out) {
                *d += o;
            }
        }
        ensure_finite(&z_next, li, usize::MAX, "mlp output")?;
        trace.z_hat.push(z_hat);
        trace.z.push(z_next.clone());
        z = z_next;
    }

    let record = project_record(weights, &trace, sample_id, with_tokens)?;
    Ok((trace, record))
}

/// Map the CLS decomposition through the frozen final layernorm and the
/// projection.
fn project_record(
    weights: &ViTWeights,
    trace: &ResidualTrace,
    sample_id: &str,
    with_tokens: bool,
) -> Result<ActivationRecord> {
    let cfg = weights.config();
    let (l_count, h_count, nt, d) = (cfg.n_layers, cfg.n_heads, trace.n_tokens, cfg.joint_dim);
    let z_last = trace.cls(trace.z.last().expect("trace has z^0"));
    let frozen = weights.ln_f.freeze(z_last);
    let project = |v: &[f64]| weights.proj.matvec(&frozen.linear(v));

    let full = weights.proj.matvec(&weights.ln_f.apply(z_last));
    ensure_finite(&full, l_count, usize::MAX, "projection")?;

    let mut residual = project(trace.cls(&trace.z[0]));
    let bias = weights.proj.matvec(&frozen.offset());
    for (r, b) in residual.iter_mut().zip(&bias) {
        *r += b;
    }
    for li in 0..l_count {
        for (r, m) in residual.iter_mut().zip(project(trace.mlp_contribution(li))) {
            *r += m;
        }
    }

    let mut contributions = HeadTensor::zeros(l_count, h_count, d);
    let mut tokens = with_tokens.then(|| TokenTensor::zeros(l_count, h_count, nt, d));
    for li in 0..l_count {
        for hi in 0..h_count {
            let c = project(&trace.head_contribution(li, hi));
            for (dst, x) in contributions.get_mut((li, hi)).iter_mut().zip(&c) {
                *dst = *x as f32;
            }
            if let Some(tt) = tokens.as_mut() {
                for t in 0..nt {
                    let c = project(trace.token_contribution(li, hi, t));
                    for (dst, x) in tt.get_mut((li, hi), t).iter_mut().zip(&c) {
                        *dst = *x as f32;
                    }
                }
            }
        }
    }

    Ok(ActivationRecord {
        sample_id: sample_id.to_string(),
        contributions,
        token_contributions: tokens,
        residual_base: residual.into_iter().map(|x| x as f32).collect(),
        full_embedding: full.into_iter().map(|x| x as f32).collect(),
    })
}
