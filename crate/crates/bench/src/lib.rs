//! Shared fixtures for the benchmarks.

use tood_core::synthdata::{generate_split, SceneRecord};
use tood_core::tal::{AnchorGrid, TalConfig};
use tood_core::trainer::ModelConfig;
use tood_core::{BBox, Instance, Tensor};

/// Deterministic scrambled values in `[lo, hi)`.
pub fn ramp(shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        let x = (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 40;
        lo + (hi - lo) * (x as f32 / (1u64 << 24) as f32)
    })
}

/// Default model config with the batch and scene counts used by the benches.
pub fn bench_config() -> ModelConfig {
    ModelConfig { train_scenes: 8, ..ModelConfig::default() }
}

pub fn bench_scenes(cfg: &ModelConfig) -> Vec<SceneRecord> {
    generate_split(0, cfg.train_scenes, &cfg.data).expect("synthetic scenes generate")
}

/// A 16x16 stride-8 grid with four instances and random score/box maps.
pub fn assignment_fixture() -> (AnchorGrid, Vec<Instance>, Tensor<f32>, Tensor<f32>, TalConfig) {
    let grid = AnchorGrid::new(16, 16, 8.0);
    let boxes = [[10.0, 12.0, 60.0, 50.0], [40.0, 40.0, 90.0, 100.0], [70.0, 8.0, 120.0, 40.0], [5.0, 80.0, 40.0, 124.0]];
    let instances = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| Instance { bbox: BBox::from_array(*b).expect("valid box"), class_id: i % 3 })
        .collect();
    (grid, instances, ramp(&[16, 16, 3], 0.0, 1.0), ramp(&[16, 16, 4], 0.5, 4.0), TalConfig::default())
}
