//! Disparity fusion head: merges four decoder feature taps into a
//! full-resolution disparity and scale map through per-tap convolutions and
//! a progressive upsample-and-add ladder.

use rand_chacha::ChaCha20Rng;

use super::blocks::{normal_init, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Param, Tape, Tensor};

/// Internal channel width of the fusion ladder.
const FUSION_DIM: usize = 16;

/// Floor added to the softplus scale output.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone)]
pub struct ConvParams {
    pub w: Param,
    pub b: Param,
}

impl ConvParams {
    fn init(name: &str, co: usize, ci: usize, k: usize, rng: &mut ChaCha20Rng) -> Self {
        let w = Param::new(format!("{name}.w"), &[co, ci, k, k], normal_init(rng, co * ci * k * k, INIT_STD))
            .expect("sized by construction");
        let b = Param::zeros(format!("{name}.b"), &[co]);
        ConvParams { w, b }
    }

    fn apply(&self, tape: &Tape, x: &Tensor, pad: usize) -> Result<Tensor> {
        x.conv2d(&tape.param(&self.w), pad)?.add_chan(&tape.param(&self.b))
    }

    fn params(&self) -> Vec<Param> {
        vec![self.w.clone(), self.b.clone()]
    }
}

#[derive(Clone)]
pub struct FusionParams {
    /// One 3×3 projection per tap, shallow to deep.
    pub proj: Vec<ConvParams>,
    /// 3×3 refinement convolutions, one per upsampling stage except the last.
    pub stages: Vec<ConvParams>,
    /// Final 3×3 convolution to 2 channels (disparity, raw scale).
    pub final_conv: ConvParams,
    /// Upsampling stages from patch-grid to pixel resolution (log2 patch).
    pub num_stages: usize,
}

impl FusionParams {
    pub fn init(name: &str, embed_dim: usize, patch_size: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        if !patch_size.is_power_of_two() || patch_size < 2 {
            return Err(Error::Config(format!(
                "patch size {patch_size} must be a power of two >= 2 for the fusion ladder"
            )));
        }
        let num_stages = patch_size.trailing_zeros() as usize;
        let proj = (0..4)
            .map(|i| ConvParams::init(&format!("{name}.proj{i}"), FUSION_DIM, embed_dim, 3, rng))
            .collect();
        let stages = (1..num_stages)
            .map(|i| ConvParams::init(&format!("{name}.stage{i}"), FUSION_DIM, FUSION_DIM, 3, rng))
            .collect();
        let final_conv = ConvParams::init(&format!("{name}.final"), 2, FUSION_DIM, 3, rng);
        Ok(FusionParams { proj, stages, final_conv, num_stages })
    }

    /// Merge the four taps (each `[num_tokens, embed_dim]`, shallow to deep)
    /// into `(d, sigma)` maps of shape `[grid_h·2^stages, grid_w·2^stages]`.
    pub fn apply(
        &self,
        tape: &Tape,
        taps: &[Tensor],
        grid_h: usize,
        grid_w: usize,
    ) -> Result<(Tensor, Tensor)> {
        if taps.len() != 4 {
            return Err(Error::domain("fusion_head", format!("expected 4 taps, got {}", taps.len())));
        }
        let embed_dim = *taps[0].shape().last().unwrap_or(&0);
        let mut grids = Vec::with_capacity(4);
        for (tap, proj) in taps.iter().zip(&self.proj) {
            let spatial = tap.transpose2()?.reshape(&[embed_dim, grid_h, grid_w])?;
            grids.push(proj.apply(tape, &spatial, 1)?);
        }
        // Deepest tap seeds the ladder; one shallower tap joins at each
        // upsampling stage, upsampled to that stage's resolution. Taps left
        // over when there are fewer stages than taps join at the base.
        let injected: Vec<Option<usize>> = (1..=self.num_stages)
            .map(|k| 3usize.checked_sub(k))
            .collect();
        let mut s = grids[3].clone();
        for (j, g) in grids.iter().enumerate().take(3) {
            if !injected.contains(&Some(j)) {
                s = s.add(g)?;
            }
        }
        for (k, tap_idx) in injected.iter().enumerate() {
            s = s.upsample2x()?;
            if let Some(j) = tap_idx {
                let mut t = grids[*j].clone();
                for _ in 0..=k {
                    t = t.upsample2x()?;
                }
                s = s.add(&t)?;
            }
            if k + 1 < self.num_stages {
                s = self.stages[k].apply(tape, &s, 1)?.gelu()?;
            }
        }
        let out = self.final_conv.apply(tape, &s, 1)?;
        let (h, w) = (grid_h << self.num_stages, grid_w << self.num_stages);
        let flat = out.reshape(&[2, h * w])?;
        let d = flat.gather_rows(&[0])?.reshape(&[h, w])?;
        let sigma = flat
            .gather_rows(&[1])?
            .softplus()?
            .add_scalar(SIGMA_FLOOR)?
            .reshape(&[h, w])?;
        Ok((d, sigma))
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p: Vec<Param> = self.proj.iter().flat_map(|c| c.params()).collect();
        p.extend(self.stages.iter().flat_map(|c| c.params()));
        p.extend(self.final_conv.params());
        p
    }
}
