//! Fixed workloads for the kernel benchmarks.

use nvsdepth::data::{generate_sample, SceneConfig, SceneSample};
use nvsdepth::nets::{build_unet, Network, UNetConfig};
use nvsdepth::{DepthMap, Shape, Tensor};

/// Desk-size scene pair (64×64, mixed primitives).
pub fn desk_sample(seed: u64) -> SceneSample {
    generate_sample(&SceneConfig::default(), seed).expect("default scene config is valid")
}

/// Deterministic values in `[-1, 1)` for a tensor of `shape`.
pub fn ramp_tensor(shape: Shape) -> Tensor<f32> {
    let data = (0..shape.numel())
        .map(|i| ((i * 7919) % 2000) as f32 / 1000.0 - 1.0)
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Prediction that is the ground truth scaled by 1.1 everywhere.
pub fn scaled_prediction(gt: &DepthMap) -> DepthMap {
    let values = gt.values().iter().map(|v| v * 1.1).collect();
    DepthMap::dense(gt.width(), gt.height(), values).expect("positive depths")
}

pub fn desk_depnet() -> Network<f32> {
    build_unet(UNetConfig::desk_depth(64, 64, 10.0), 1).expect("desk config is valid")
}
