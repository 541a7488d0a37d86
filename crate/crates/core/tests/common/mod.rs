#![allow(dead_code)]

use gated_vpt::prompt::{TunedModel, TuningConfig, TuningMode};
use gated_vpt::vit::{init_params, ViTConfig};
use gated_vpt::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Four blocks on 8x8x3 images with 4x4 patches; fast enough for exhaustive checks.
pub fn small_vit() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 16,
        num_blocks: 4,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        layer_norm_eps: 1e-6,
    }
}

pub fn images(cfg: &ViTConfig, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * cfg.image_len();
    let s = cfg.image_size;
    Tensor::new(
        [batch, s, s, cfg.channels],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn labels(cfg: &ViTConfig, batch: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..batch).map(|_| rng.random_range(0..cfg.num_classes)).collect()
}

pub fn model(cfg: &ViTConfig, tuning: TuningConfig, seed: u64) -> TunedModel {
    let backbone = init_params(cfg, seed).unwrap();
    TunedModel::new(cfg.clone(), tuning, &backbone, seed, seed + 1).unwrap()
}

pub fn gated(cfg: &ViTConfig, num_prompts: usize, shaping: bool, seed: u64) -> TunedModel {
    model(cfg, TuningConfig::new(TuningMode::Gated, num_prompts).with_shaping(shaping), seed)
}

/// Overwrites every element of a parameter with values from `seed`.
pub fn randomize(model: &mut TunedModel, name: &str, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = model.params.get_mut(name).unwrap();
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
}
