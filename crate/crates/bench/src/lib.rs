// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic fixtures shared by the benchmarks.

use headlens::interpret::LinearProvider;
use headlens::synth::{generate, SynthConfig, SynthDataset};
use headlens::vit::{Patches, ViTConfig, ViTWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A ViT-Ti-like encoder scaled down to benchmark size.
pub fn small_vit(seed: u64) -> (ViTWeights, Patches) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ViTConfig {
        n_layers: 6,
        n_heads: 8,
        d_model: 64,
        d_ff: 128,
        patch_dim: 48,
        joint_dim: 32,
        layer_norm: true,
    };
    let w = ViTWeights::random(cfg, &mut rng);
    let p = Patches::random(16, cfg.patch_dim, &mut rng);
    (w, p)
}

/// Default planted-bias dataset with `per_cell` samples in each of the four cells.
pub fn dataset(per_cell: usize) -> SynthDataset {
    generate(&SynthConfig {
        cell_counts: vec![per_cell],
        ..SynthConfig::default()
    })
    .expect("default configuration is valid")
}

/// Linear caption provider with `tokens` random token vectors and a matching state.
pub fn caption(tokens: usize, dim: usize, seed: u64) -> (LinearProvider, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let token_vectors = (0..tokens).map(|_| draw(dim)).collect();
    (LinearProvider { token_vectors }, draw(dim))
}
