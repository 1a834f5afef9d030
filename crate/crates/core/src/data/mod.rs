//! Synthetic stereo-pair generation with exact ground-truth disparity,
//! ground-truth sparsification, cropping, and disparity/image file I/O.

mod io;

pub use io::{
    load_dataset, read_disp_png, read_image_png, read_pfm, save_dataset, write_disp_png,
    write_image_png, write_pfm,
};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// One rectified stereo pair with dense ground-truth disparity for the left
/// view and an occlusion-aware validity mask. Images are channel-major
/// `[C, H, W]` with values in `[0, 1]`; disparity is in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub d_gt_dense: Vec<f64>,
    pub valid: Vec<bool>,
    pub seed: u64,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl StereoSample {
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Procedural texture for one scene layer, defined on the whole plane so a
/// layer can extend past the left image border. In `linear_x` mode the value
/// is affine in x, which keeps subpixel warps exactly linear.
#[derive(Debug, Clone)]
pub struct Texture {
    salt: u64,
    base: Vec<f64>,
    slope_x: f64,
    freq_x: f64,
    freq_y: f64,
    phase: f64,
    wave_amp: f64,
    noise_amp: f64,
    linear_x: bool,
}

fn hash2(x: i64, y: i64, salt: u64) -> f64 {
    let mut z = (x as u64)
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((y as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(salt);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

impl Texture {
    pub fn random(rng: &mut ChaCha20Rng, channels: usize, linear_x: bool) -> Texture {
        let base_range = if linear_x { 0.35..0.55 } else { 0.35..0.6 };
        Texture {
            salt: rng.gen(),
            base: (0..channels).map(|_| rng.gen_range(base_range.clone())).collect(),
            slope_x: rng.gen_range(-0.001..0.001),
            freq_x: rng.gen_range(0.05..0.3),
            freq_y: rng.gen_range(0.05..0.3),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            wave_amp: if linear_x { rng.gen_range(0.05..0.1) } else { rng.gen_range(0.08..0.18) },
            noise_amp: rng.gen_range(0.05..0.12),
            linear_x,
        }
    }

    /// Texture value at a world position; `x` may be fractional only in
    /// `linear_x` mode. Parameter ranges keep values inside [0, 1] for world
    /// x up to a few hundred pixels.
    fn value(&self, channel: usize, x: f64, y: i64) -> f64 {
        let b = self.base[channel];
        if self.linear_x {
            b + self.slope_x * x + self.wave_amp * (self.freq_y * y as f64 + self.phase).sin()
        } else {
            let xi = x as i64;
            b + self.wave_amp * (self.freq_x * x + self.freq_y * y as f64 + self.phase).sin()
                + self.noise_amp * (hash2(xi, y, self.salt ^ channel as u64) - 0.5)
        }
    }
}

/// Geometry of one layer, in left-view coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerShape {
    /// Infinite plane; covers every position.
    Background,
    /// Half-open box `[x0, x1) × [y0, y1)`.
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl LayerShape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            LayerShape::Background => true,
            LayerShape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            LayerShape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

/// A fronto-parallel textured surface at a fixed disparity.
#[derive(Debug, Clone)]
pub struct Layer {
    pub shape: LayerShape,
    pub disparity: f64,
    pub texture: Texture,
}

/// Controls for the random scene generator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneParams {
    /// Foreground shapes on top of the background plane.
    pub num_shapes: usize,
    pub min_disparity: usize,
    pub max_disparity: usize,
    /// Add fractional offsets to layer disparities; warps then interpolate.
    pub subpixel: bool,
    pub channels: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            num_shapes: 3,
            min_disparity: 1,
            max_disparity: 10,
            subpixel: false,
            channels: 1,
        }
    }
}

/// The nearest layer (largest disparity) covering a world position, if any
/// layer does.
fn winner(layers: &[Layer], x: f64, y: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, layer) in layers.iter().enumerate() {
        if layer.shape.contains(x, y)
            && best.is_none_or(|b| layer.disparity > layers[b].disparity)
        {
            best = Some(i);
        }
    }
    best
}

/// Winner as seen from a right-view pixel column: each layer is shifted left
/// by its own disparity.
fn winner_right(layers: &[Layer], x_r: f64, y: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, layer) in layers.iter().enumerate() {
        if layer.shape.contains(x_r + layer.disparity, y)
            && best.is_none_or(|b| layer.disparity > layers[b].disparity)
        {
            best = Some(i);
        }
    }
    best
}

/// Render a stereo pair from an explicit layer stack. Layers must have
/// pairwise-distinct disparities and include a `Background`. The right view
/// is synthesized by shifting each layer by its disparity; left-view pixels
/// whose match falls outside the frame or behind a nearer layer are marked
/// invalid.
pub fn render_scene(
    layers: &[Layer],
    h: usize,
    w: usize,
    channels: usize,
    seed: u64,
) -> Result<StereoSample> {
    if h == 0 || w == 0 || channels == 0 {
        return Err(Error::domain("render_scene", "empty image dimensions"));
    }
    if !layers.iter().any(|l| l.shape == LayerShape::Background) {
        return Err(Error::domain("render_scene", "no background layer"));
    }
    for (i, a) in layers.iter().enumerate() {
        if a.disparity.is_nan() || a.disparity < 0.0 || a.disparity >= w as f64 {
            return Err(Error::domain("render_scene", "disparity outside [0, W)"));
        }
        if layers[..i].iter().any(|b| b.disparity == a.disparity) {
            return Err(Error::domain("render_scene", "duplicate layer disparity"));
        }
    }

    let pixels = h * w;
    let mut left = vec![0.0; channels * pixels];
    let mut right = vec![0.0; channels * pixels];
    let mut d_gt = vec![0.0; pixels];
    let mut valid = vec![false; pixels];

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let li = winner(layers, x as f64, y as f64).expect("background covers all");
            let layer = &layers[li];
            d_gt[i] = layer.disparity;
            for c in 0..channels {
                left[c * pixels + i] = layer.texture.value(c, x as f64, y as i64);
            }
            // A pixel is valid when its match point is in frame and the
            // right view shows this same layer across the interpolation
            // support of the match column.
            let xm = x as f64 - layer.disparity;
            let (lo, hi) = (xm.floor(), xm.ceil());
            valid[i] = lo >= 0.0
                && hi < w as f64
                && winner_right(layers, lo, y as f64) == Some(li)
                && winner_right(layers, hi, y as f64) == Some(li);
        }
        for x_r in 0..w {
            let i = y * w + x_r;
            let li = winner_right(layers, x_r as f64, y as f64).expect("background covers all");
            let layer = &layers[li];
            for c in 0..channels {
                right[c * pixels + i] =
                    layer.texture.value(c, x_r as f64 + layer.disparity, y as i64);
            }
        }
    }
    Ok(StereoSample { left, right, d_gt_dense: d_gt, valid, seed, channels, h, w })
}

/// Generate a random layered scene: a textured background plane plus
/// `num_shapes` rectangles and ellipses at distinct disparities, nearest on
/// top. Deterministic per seed.
pub fn synth_generate(seed: u64, h: usize, w: usize, params: &SceneParams) -> Result<StereoSample> {
    if h < 8 || w < 16 {
        return Err(Error::domain("synth_generate", "image too small"));
    }
    if params.channels == 0 {
        return Err(Error::domain("synth_generate", "channels must be positive"));
    }
    if params.min_disparity > params.max_disparity {
        return Err(Error::domain("synth_generate", "min_disparity exceeds max_disparity"));
    }
    if params.max_disparity * 4 >= w {
        return Err(Error::domain("synth_generate", "max disparity must stay below W/4"));
    }
    let span = params.max_disparity - params.min_disparity + 1;
    if span < params.num_shapes + 1 {
        return Err(Error::domain(
            "synth_generate",
            "disparity range too narrow for distinct layers",
        ));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut disparities: Vec<usize> = (params.min_disparity..=params.max_disparity).collect();
    disparities.shuffle(&mut rng);
    disparities.truncate(params.num_shapes + 1);
    disparities.sort_unstable();

    let frac = |rng: &mut ChaCha20Rng| {
        if params.subpixel {
            [0.25, 0.5, 0.75][rng.gen_range(0..3)]
        } else {
            0.0
        }
    };

    let mut layers = Vec::with_capacity(params.num_shapes + 1);
    let bg_frac = frac(&mut rng);
    layers.push(Layer {
        shape: LayerShape::Background,
        disparity: disparities[0] as f64 + bg_frac,
        texture: Texture::random(&mut rng, params.channels, params.subpixel),
    });
    for &d in &disparities[1..] {
        let disparity = d as f64 + frac(&mut rng);
        let sw = rng.gen_range(w as f64 / 6.0..w as f64 / 3.0);
        let sh = rng.gen_range(h as f64 / 6.0..h as f64 / 3.0);
        let x0 = rng.gen_range(0.0..w as f64 - sw);
        let y0 = rng.gen_range(0.0..h as f64 - sh);
        let shape = if rng.gen_bool(0.5) {
            LayerShape::Rect { x0, y0, x1: x0 + sw, y1: y0 + sh }
        } else {
            LayerShape::Ellipse {
                cx: x0 + sw / 2.0,
                cy: y0 + sh / 2.0,
                rx: sw / 2.0,
                ry: sh / 2.0,
            }
        };
        layers.push(Layer {
            shape,
            disparity,
            texture: Texture::random(&mut rng, params.channels, params.subpixel),
        });
    }
    render_scene(&layers, h, w, params.channels, seed)
}

/// Thin the valid mask to a uniformly random subset holding exactly
/// `round(keep_fraction · |valid|)` pixels. Disparity values are untouched.
pub fn sparsify_gt(sample: &StereoSample, keep_fraction: f64, seed: u64) -> Result<StereoSample> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::domain("sparsify_gt", "keep_fraction must be in (0, 1]"));
    }
    let mut out = sample.clone();
    let mut idx: Vec<usize> = (0..sample.valid.len()).filter(|&i| sample.valid[i]).collect();
    let keep = (keep_fraction * idx.len() as f64).round() as usize;
    if keep == idx.len() {
        return Ok(out);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: the first `keep` entries become the kept subset.
    for i in 0..keep {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    out.valid = vec![false; sample.valid.len()];
    for &i in &idx[..keep] {
        out.valid[i] = true;
    }
    Ok(out)
}

/// Crop the same window out of both views, the disparity map, and the valid
/// mask. Disparity values are unchanged. Deterministic per seed.
pub fn random_crop(
    sample: &StereoSample,
    crop_h: usize,
    crop_w: usize,
    seed: u64,
) -> Result<StereoSample> {
    if crop_h == 0 || crop_w == 0 || crop_h > sample.h || crop_w > sample.w {
        return Err(Error::domain("random_crop", "crop exceeds image bounds"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let y0 = rng.gen_range(0..=sample.h - crop_h);
    let x0 = rng.gen_range(0..=sample.w - crop_w);
    Ok(crop_at(sample, y0, x0, crop_h, crop_w))
}

fn crop_at(
    sample: &StereoSample,
    y0: usize,
    x0: usize,
    crop_h: usize,
    crop_w: usize,
) -> StereoSample {
    let pixels = sample.pixels();
    let take_img = |img: &[f64]| {
        let mut out = Vec::with_capacity(sample.channels * crop_h * crop_w);
        for c in 0..sample.channels {
            for y in 0..crop_h {
                let row = c * pixels + (y0 + y) * sample.w + x0;
                out.extend_from_slice(&img[row..row + crop_w]);
            }
        }
        out
    };
    let mut d_gt = Vec::with_capacity(crop_h * crop_w);
    let mut valid = Vec::with_capacity(crop_h * crop_w);
    for y in 0..crop_h {
        let row = (y0 + y) * sample.w + x0;
        d_gt.extend_from_slice(&sample.d_gt_dense[row..row + crop_w]);
        valid.extend_from_slice(&sample.valid[row..row + crop_w]);
    }
    StereoSample {
        left: take_img(&sample.left),
        right: take_img(&sample.right),
        d_gt_dense: d_gt,
        valid,
        seed: sample.seed,
        channels: sample.channels,
        h: crop_h,
        w: crop_w,
    }
}

/// Mean absolute difference between the left view and the right view warped
/// back by the ground-truth disparity, over valid pixels. Fractional match
/// positions interpolate linearly. Zero for integer-disparity scenes.
pub fn warp_consistency_error(sample: &StereoSample) -> Result<f64> {
    let pixels = sample.pixels();
    let (mut acc, mut n) = (0.0, 0usize);
    for y in 0..sample.h {
        for x in 0..sample.w {
            let i = y * sample.w + x;
            if !sample.valid[i] {
                continue;
            }
            let xm = x as f64 - sample.d_gt_dense[i];
            let (lo, hi) = (xm.floor(), xm.ceil());
            if lo < 0.0 || hi >= sample.w as f64 {
                return Err(Error::domain(
                    "warp_consistency_error",
                    "valid pixel matches outside the frame",
                ));
            }
            let t = xm - lo;
            for c in 0..sample.channels {
                let row = c * pixels + y * sample.w;
                let r_lo = sample.right[row + lo as usize];
                let r_hi = sample.right[row + hi as usize];
                let warped = r_lo + t * (r_hi - r_lo);
                acc += (sample.left[c * pixels + i] - warped).abs();
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::domain("warp_consistency_error", "no valid pixels"));
    }
    Ok(acc / (n * sample.channels) as f64)
}
