// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight and patch files, using the same manifest + packed `float32`
//! convention as the activation store.
//!
//! Weight fields: `patch_embed`, `cls_token`, `ln1.g`, `ln1.b`, `attn.q`,
//! `attn.k`, `attn.v`, `attn.o`, `ln2.g`, `ln2.b`, `mlp.in`, `mlp.out`,
//! `ln_f.g`, `ln_f.b`, `proj`. Per-layer fields carry a leading `L` axis and
//! per-head fields a leading `[L, H]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::weights::LN_EPS;
use super::{HeadWeights, LayerNorm, LayerWeights, Matrix, Patches, ViTConfig, ViTWeights};
use crate::error::{Error, Result};
use crate::store::blob::{read_tensor_dir, write_tensor_dir, NamedTensor};

/// Manifest file name inside a weights directory.
pub const WEIGHTS_MANIFEST: &str = "weights.json";
/// Manifest file name inside a patches directory.
pub const PATCHES_MANIFEST: &str = "patches.json";

#[derive(Serialize, Deserialize)]
struct WeightsMeta {
    #[serde(flatten)]
    config: ViTConfig,
    #[serde(default = "default_eps")]
    eps: f64,
}

fn default_eps() -> f64 {
    LN_EPS
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Write `weights` into the directory `dir`.
pub fn write_weights(weights: &ViTWeights, dir: &Path) -> Result<()> {
    weights.validate()?;
    let c = *weights.config();
    let layers = &weights.layers;
    let stack = |f: &dyn Fn(&LayerWeights) -> Vec<f64>| -> Vec<f32> {
        layers.iter().flat_map(|l| to_f32(&f(l))).collect()
    };
    let per_head = |f: &dyn Fn(&HeadWeights) -> &Matrix| -> Vec<f32> {
        layers
            .iter()
            .flat_map(|l| l.heads.iter().flat_map(|h| to_f32(f(h).as_slice())))
            .collect()
    };
    let (l, h, dm, dh, ff) = (c.n_layers, c.n_heads, c.d_model, c.head_dim(), c.d_ff);

    let patch_embed = to_f32(weights.patch_embed.as_slice());
    let cls = to_f32(&weights.cls_token);
    let ln1g = stack(&|x| x.ln1.gain.clone());
    let ln1b = stack(&|x| x.ln1.bias.clone());
    let ln2g = stack(&|x| x.ln2.gain.clone());
    let ln2b = stack(&|x| x.ln2.bias.clone());
    let q = per_head(&|x| &x.q);
    let k = per_head(&|x| &x.k);
    let v = per_head(&|x| &x.v);
    let o = per_head(&|x| &x.o);
    let mlp_in = stack(&|x| x.mlp_in.as_slice().to_vec());
    let mlp_out = stack(&|x| x.mlp_out.as_slice().to_vec());
    let lnfg = to_f32(&weights.ln_f.gain);
    let lnfb = to_f32(&weights.ln_f.bias);
    let proj = to_f32(weights.proj.as_slice());

    let t = |name, shape, data| NamedTensor { name, shape, data };
    let tensors = [
        t("patch_embed", vec![dm, c.patch_dim], &patch_embed[..]),
        t("cls_token", vec![dm], &cls),
        t("ln1.g", vec![l, dm], &ln1g),
        t("ln1.b", vec![l, dm], &ln1b),
        t("attn.q", vec![l, h, dh, dm], &q),
        t("attn.k", vec![l, h, dh, dm], &k),
        t("attn.v", vec![l, h, dh, dm], &v),
        t("attn.o", vec![l, h, dm, dh], &o),
        t("ln2.g", vec![l, dm], &ln2g),
        t("ln2.b", vec![l, dm], &ln2b),
        t("mlp.in", vec![l, ff, dm], &mlp_in),
        t("mlp.out", vec![l, dm, ff], &mlp_out),
        t("ln_f.g", vec![dm], &lnfg),
        t("ln_f.b", vec![dm], &lnfb),
        t("proj", vec![c.joint_dim, dm], &proj),
    ];
    let meta = serde_json::to_value(WeightsMeta {
        config: c,
        eps: weights.ln_f.eps,
    })
    .map_err(|e| Error::json(dir.join(WEIGHTS_MANIFEST), e))?;
    write_tensor_dir(dir, WEIGHTS_MANIFEST, "vit_weights", meta, &tensors)
}

/// Read weights written by [`write_weights`] (values are upcast to `f64`).
pub fn read_weights(dir: &Path) -> Result<ViTWeights> {
    let mut loaded = read_tensor_dir(dir, WEIGHTS_MANIFEST)?;
    let meta: WeightsMeta = serde_json::from_value(loaded.manifest.meta.clone())
        .map_err(|e| Error::json(dir.join(WEIGHTS_MANIFEST), e))?;
    let c = meta.config;
    c.validate()?;
    let (l, h, dm, dh, ff) = (c.n_layers, c.n_heads, c.d_model, c.head_dim(), c.d_ff);

    let patch_embed = Matrix::from_vec(
        dm,
        c.patch_dim,
        to_f64(&loaded.take("patch_embed", &[dm, c.patch_dim])?),
    )?;
    let cls_token = to_f64(&loaded.take("cls_token", &[dm])?);
    let ln1g = loaded.take("ln1.g", &[l, dm])?;
    let ln1b = loaded.take("ln1.b", &[l, dm])?;
    let ln2g = loaded.take("ln2.g", &[l, dm])?;
    let ln2b = loaded.take("ln2.b", &[l, dm])?;
    let q = loaded.take("attn.q", &[l, h, dh, dm])?;
    let k = loaded.take("attn.k", &[l, h, dh, dm])?;
    let v = loaded.take("attn.v", &[l, h, dh, dm])?;
    let o = loaded.take("attn.o", &[l, h, dm, dh])?;
    let mlp_in = loaded.take("mlp.in", &[l, ff, dm])?;
    let mlp_out = loaded.take("mlp.out", &[l, dm, ff])?;
    let lnfg = loaded.take("ln_f.g", &[dm])?;
    let lnfb = loaded.take("ln_f.b", &[dm])?;
    let proj = Matrix::from_vec(
        c.joint_dim,
        dm,
        to_f64(&loaded.take("proj", &[c.joint_dim, dm])?),
    )?;

    let norm = |g: &[f32], b: &[f32]| LayerNorm {
        gain: to_f64(g),
        bias: to_f64(b),
        normalize: c.layer_norm,
        eps: meta.eps,
    };
    let hs = dh * dm;
    let mut layers = Vec::with_capacity(l);
    for li in 0..l {
        let mut heads = Vec::with_capacity(h);
        for hi in 0..h {
            let at = (li * h + hi) * hs;
            heads.push(HeadWeights {
                q: Matrix::from_vec(dh, dm, to_f64(&q[at..at + hs]))?,
                k: Matrix::from_vec(dh, dm, to_f64(&k[at..at + hs]))?,
                v: Matrix::from_vec(dh, dm, to_f64(&v[at..at + hs]))?,
                o: Matrix::from_vec(dm, dh, to_f64(&o[at..at + hs]))?,
            });
        }
        let row = li * dm..(li + 1) * dm;
        layers.push(LayerWeights {
            ln1: norm(&ln1g[row.clone()], &ln1b[row.clone()]),
            heads,
            ln2: norm(&ln2g[row.clone()], &ln2b[row]),
            mlp_in: Matrix::from_vec(ff, dm, to_f64(&mlp_in[li * ff * dm..(li + 1) * ff * dm]))?,
            mlp_out: Matrix::from_vec(dm, ff, to_f64(&mlp_out[li * ff * dm..(li + 1) * ff * dm]))?,
        });
    }
    let weights = ViTWeights {
        config: c,
        patch_embed,
        cls_token,
        layers,
        ln_f: norm(&lnfg, &lnfb),
        proj,
    };
    weights.validate()?;
    Ok(weights)
}

/// Pre-extracted patches for a batch of images.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// Image identifiers, one per entry of `patches`.
    pub sample_ids: Vec<String>,
    /// Per-image patches; all share the same shape.
    pub patches: Vec<Patches>,
}

#[derive(Serialize, Deserialize)]
struct PatchMeta {
    sample_ids: Vec<String>,
    n_patches: usize,
    patch_dim: usize,
}

/// Write a [`PatchSet`] as a `[M, N, patch_dim]` tensor directory.
pub fn write_patches(set: &PatchSet, dir: &Path) -> Result<()> {
    if set.sample_ids.len() != set.patches.len() {
        return Err(Error::Dimension(
            "one sample id per patch block is required".into(),
        ));
    }
    let (n, pd) = set.patches.first().map_or((0, 0), |p| (p.n, p.patch_dim));
    if set.patches.iter().any(|p| p.n != n || p.patch_dim != pd) {
        return Err(Error::Dimension(
            "all images must have the same patch shape".into(),
        ));
    }
    let flat: Vec<f32> = set
        .patches
        .iter()
        .flat_map(|p| p.data.iter().copied())
        .collect();
    let meta = serde_json::to_value(PatchMeta {
        sample_ids: set.sample_ids.clone(),
        n_patches: n,
        patch_dim: pd,
    })
    .map_err(|e| Error::json(dir.join(PATCHES_MANIFEST), e))?;
    write_tensor_dir(
        dir,
        PATCHES_MANIFEST,
        "patches",
        meta,
        &[NamedTensor {
            name: "patches",
            shape: vec![set.patches.len(), n, pd],
            data: &flat,
        }],
    )
}

/// Read a directory written by [`write_patches`].
pub fn read_patches(dir: &Path) -> Result<PatchSet> {
    let mut loaded = read_tensor_dir(dir, PATCHES_MANIFEST)?;
    let meta: PatchMeta = serde_json::from_value(loaded.manifest.meta.clone())
        .map_err(|e| Error::json(dir.join(PATCHES_MANIFEST), e))?;
    let m = meta.sample_ids.len();
    let flat = loaded.take("patches", &[m, meta.n_patches, meta.patch_dim])?;
    let per = meta.n_patches * meta.patch_dim;
    let patches = (0..m)
        .map(|i| {
            Patches::new(
                meta.n_patches,
                meta.patch_dim,
                flat[i * per..(i + 1) * per].to_vec(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSet {
        sample_ids: meta.sample_ids,
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn weights_survive_a_round_trip_up_to_f32() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let cfg = ViTConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 4,
            d_ff: 6,
            patch_dim: 3,
            joint_dim: 2,
            layer_norm: true,
        };
        let w = ViTWeights::random(cfg, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        write_weights(&w, dir.path()).unwrap();
        let back = read_weights(dir.path()).unwrap();
        assert_eq!(back.config(), w.config());
        let a = w.layers[1].heads[1].o.as_slice();
        let b = back.layers[1].heads[1].o.as_slice();
        for (x, y) in a.iter().zip(b) {
            assert_eq!(*x as f32, *y as f32);
        }
        // a second round trip is exact
        let dir2 = tempfile::tempdir().unwrap();
        write_weights(&back, dir2.path()).unwrap();
        assert_eq!(read_weights(dir2.path()).unwrap(), back);
    }

    #[test]
    fn patch_sets_round_trip() {
        let set = PatchSet {
            sample_ids: vec!["a".into(), "b".into()],
            patches: vec![
                Patches::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                Patches::new(2, 2, vec![-1.0, 0.5, 0.0, 9.0]).unwrap(),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        write_patches(&set, dir.path()).unwrap();
        assert_eq!(read_patches(dir.path()).unwrap(), set);
    }
}
