//! Shared fixtures for the benchmark targets.

use stereomim_core::data::{synth_generate, SceneParams, StereoSample};
use stereomim_core::model::{ModelConfig, StereoModel};
use stereomim_core::Result;

/// Model plus a small batch of matching synthetic pairs.
pub struct Fixture {
    pub model: StereoModel,
    pub batch: Vec<StereoSample>,
}

fn build(cfg: ModelConfig, batch_size: usize) -> Result<Fixture> {
    let params = SceneParams {
        max_disparity: (cfg.image_w / 8).clamp(1, 10),
        ..SceneParams::default()
    };
    let batch = (0..batch_size)
        .map(|i| synth_generate(i as u64, cfg.image_h, cfg.image_w, &params))
        .collect::<Result<Vec<_>>>()?;
    let model = StereoModel::new(cfg, 0)?;
    Ok(Fixture { model, batch })
}

/// 32x64 images, two encoder and decoder blocks.
pub fn toy_fixture(batch_size: usize) -> Result<Fixture> {
    build(ModelConfig::toy(), batch_size)
}

/// The shipped 64x128 configuration.
pub fn desk_fixture(batch_size: usize) -> Result<Fixture> {
    build(ModelConfig::default(), batch_size)
}
