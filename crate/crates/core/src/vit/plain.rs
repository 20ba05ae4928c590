// SPDX-License-Identifier: MIT OR Apache-2.0

//! Undecomposed forward pass.
//!
//! Written independently of the decomposed path: heads are concatenated into
//! full `[d_model, d_model]` projections, attention is computed as a dense
//! matrix, and layernorm is recomputed here rather than shared.

use super::{gelu, Patches, ViTWeights};
use crate::error::{Error, Result};

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], normalize: bool, eps: f64) -> Vec<f64> {
    let (mean, denom) = if normalize {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, (var + eps).sqrt())
    } else {
        (0.0, 1.0)
    };
    (0..x.len())
        .map(|i| (x[i] - mean) / denom * gain[i] + bias[i])
        .collect()
}

/// Dense `rows × cols` product of a row-major buffer with `x`.
fn mul(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| m[r * cols + c] * x[c]).sum())
        .collect()
}

/// Image embedding `P · LN_f(z_L[CLS])` with no decomposition.
pub fn forward_plain(weights: &ViTWeights, patches: &Patches) -> Result<Vec<f64>> {
    weights.check_patches(patches)?;
    let cfg = *weights.config();
    let (dm, dh, nh) = (cfg.d_model, cfg.head_dim(), cfg.n_heads);
    let nt = patches.n + 1;

    let mut x: Vec<Vec<f64>> = Vec::with_capacity(nt);
    x.push(weights.cls_token.clone());
    for i in 0..patches.n {
        let p: Vec<f64> = patches.row(i).iter().map(|&v| f64::from(v)).collect();
        x.push(mul(weights.patch_embed.as_slice(), dm, cfg.patch_dim, &p));
    }

    for (li, layer) in weights.layers.iter().enumerate() {
        // Stack per-head maps into full matrices.
        let mut wq = Vec::with_capacity(dm * dm);
        let mut wk = Vec::with_capacity(dm * dm);
        let mut wv = Vec::with_capacity(dm * dm);
        for head in &layer.heads {
            wq.extend_from_slice(head.q.as_slice());
            wk.extend_from_slice(head.k.as_slice());
            wv.extend_from_slice(head.v.as_slice());
        }
        let mut wo = vec![0.0; dm * dm];
        for (h, head) in layer.heads.iter().enumerate() {
            for r in 0..dm {
                for c in 0..dh {
                    wo[r * dm + h * dh + c] = head.o.at(r, c);
                }
            }
        }

        let ln1 = &layer.ln1;
        let normed: Vec<Vec<f64>> = x
            .iter()
            .map(|t| layer_norm(t, &ln1.gain, &ln1.bias, ln1.normalize, ln1.eps))
            .collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|t| mul(&wq, dm, dm, t)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|t| mul(&wk, dm, dm, t)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|t| mul(&wv, dm, dm, t)).collect();

        let mut concat = vec![vec![0.0; dm]; nt];
        for h in 0..nh {
            let span = h * dh..(h + 1) * dh;
            for i in 0..nt {
                let scores: Vec<f64> = (0..nt)
                    .map(|j| {
                        span.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in span.clone() {
                    concat[i][c] = (0..nt).map(|j| exps[j] / z * v[j][c]).sum();
                }
            }
        }
        for i in 0..nt {
            let out = mul(&wo, dm, dm, &concat[i]);
            for c in 0..dm {
                x[i][c] += out[c];
            }
        }

        let ln2 = &layer.ln2;
        for t in x.iter_mut() {
            let n = layer_norm(t, &ln2.gain, &ln2.bias, ln2.normalize, ln2.eps);
            let hidden: Vec<f64> = mul(layer.mlp_in.as_slice(), cfg.d_ff, dm, &n)
                .into_iter()
                .map(gelu)
                .collect();
            let out = mul(layer.mlp_out.as_slice(), dm, cfg.d_ff, &hidden);
            for c in 0..dm {
                t[c] += out[c];
            }
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: li,
                head: usize::MAX,
                stage: "plain forward",
            });
        }
    }

    let lnf = &weights.ln_f;
    let cls = layer_norm(&x[0], &lnf.gain, &lnf.bias, lnf.normalize, lnf.eps);
    let out = mul(weights.proj.as_slice(), cfg.joint_dim, dm, &cls);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            layer: cfg.n_layers,
            head: usize::MAX,
            stage: "plain projection",
        });
    }
    Ok(out)
}
