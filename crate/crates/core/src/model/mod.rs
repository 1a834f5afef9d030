//! The masked stereo transformer: configuration, patch masking, the
//! encoder/decoder network, and the student/teacher forward passes.

pub mod blocks;
pub mod fusion;
pub mod patches;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Param, Tape, Tensor};
use blocks::{DecoderBlock, EncoderBlock, LayerNormParams, LinearParams};
use fusion::FusionParams;
pub use patches::{patchify, pos_embed_2d, unpatchify};

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    /// Fraction of patches masked per view.
    pub mask_ratio: f64,
    /// Decoder layers (1-based) whose outputs feed the fusion head.
    pub fusion_taps: [usize; 4],
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_h: 64,
            image_w: 128,
            channels: 1,
            patch_size: 16,
            embed_dim: 64,
            encoder_depth: 4,
            decoder_depth: 4,
            num_heads: 4,
            mask_ratio: 0.4,
            fusion_taps: [1, 2, 3, 4],
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Miniature geometry for fast gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            image_h: 32,
            image_w: 64,
            embed_dim: 32,
            encoder_depth: 2,
            decoder_depth: 2,
            fusion_taps: Self::spread_taps(2),
            ..ModelConfig::default()
        }
    }

    /// Four fusion taps spread evenly over a decoder of the given depth;
    /// shallow decoders repeat layers.
    pub fn spread_taps(decoder_depth: usize) -> [usize; 4] {
        std::array::from_fn(|k| ((k + 1) * decoder_depth).div_ceil(4).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.image_h == 0 || self.image_w == 0 || self.channels == 0 {
            return err(format!("empty image dims {}x{}x{}", self.image_h, self.image_w, self.channels));
        }
        if !self.patch_size.is_power_of_two() || self.patch_size < 2 {
            return err(format!("patch_size {} must be a power of two >= 2", self.patch_size));
        }
        if !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            return err(format!(
                "image {}x{} not divisible by patch_size {}",
                self.image_h, self.image_w, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return err(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return err(format!("embed_dim {} must be divisible by 4", self.embed_dim));
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return err("encoder_depth and decoder_depth must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return err(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if self.ln_eps <= 0.0 {
            return err(format!("ln_eps {} must be positive", self.ln_eps));
        }
        for &t in &self.fusion_taps {
            if t == 0 || t > self.decoder_depth {
                return err(format!(
                    "fusion tap {t} outside decoder range 1..={}",
                    self.decoder_depth
                ));
            }
        }
        let sorted = self.fusion_taps.windows(2).all(|w| w[0] <= w[1]);
        if !sorted {
            return err(format!("fusion_taps {:?} must be non-decreasing", self.fusion_taps));
        }
        // With at least 4 decoder layers the taps must be distinct layers;
        // shallower decoders necessarily repeat taps.
        if self.decoder_depth >= 4 {
            let strict = self.fusion_taps.windows(2).all(|w| w[0] < w[1]);
            if !strict {
                return err(format!(
                    "fusion_taps {:?} must be strictly increasing for decoder_depth {}",
                    self.fusion_taps, self.decoder_depth
                ));
            }
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Flattened pixel values per token.
    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.image_h * self.image_w
    }
}

// ── Patch masks ─────────────────────────────────────────────────────────────

/// Which patches of one view are hidden from the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    flags: Vec<bool>,
    num_masked: usize,
}

impl PatchMask {
    pub fn empty(num_patches: usize) -> Self {
        PatchMask { flags: vec![false; num_patches], num_masked: 0 }
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        let num_masked = flags.iter().filter(|&&f| f).count();
        PatchMask { flags, num_masked }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn num_patches(&self) -> usize {
        self.flags.len()
    }

    pub fn num_masked(&self) -> usize {
        self.num_masked
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.flags[i]
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| self.flags[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| !self.flags[i]).collect()
    }
}

/// Draw a mask hiding exactly `round(ratio · n)` of `n` patches, uniformly
/// without replacement.
pub fn sample_mask(n: usize, ratio: f64, rng: &mut ChaCha20Rng) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::domain("sample_mask", format!("ratio {ratio} outside [0, 1]")));
    }
    let num_masked = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..num_masked {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    let mut flags = vec![false; n];
    for &i in &order[..num_masked] {
        flags[i] = true;
    }
    Ok(PatchMask { flags, num_masked })
}

// ── Network ─────────────────────────────────────────────────────────────────

fn detach(p: &Param) -> Param {
    Param::new(p.name(), p.shape(), p.value()).expect("shape matches existing param")
}

/// Patch projection plus the self-attention trunk applied to visible tokens.
#[derive(Clone)]
pub struct Encoder {
    pub patch_embed: LinearParams,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNormParams,
}

impl Encoder {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        let hidden = 4 * cfg.embed_dim;
        Encoder {
            patch_embed: LinearParams::init("enc.patch_embed", cfg.token_dim(), cfg.embed_dim, rng),
            blocks: (0..cfg.encoder_depth)
                .map(|i| {
                    EncoderBlock::init(
                        &format!("enc.block{i}"),
                        cfg.embed_dim,
                        cfg.num_heads,
                        hidden,
                        cfg.ln_eps,
                        rng,
                    )
                })
                .collect(),
            norm: LayerNormParams::init("enc.norm", cfg.embed_dim, cfg.ln_eps),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.patch_embed.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.norm.params());
        p
    }

    /// Copy with fresh storage holding the same values.
    pub fn deep_copy(&self) -> Encoder {
        Encoder {
            patch_embed: LinearParams {
                w: detach(&self.patch_embed.w),
                b: detach(&self.patch_embed.b),
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlock {
                    norm1: LayerNormParams {
                        gamma: detach(&b.norm1.gamma),
                        beta: detach(&b.norm1.beta),
                        eps: b.norm1.eps,
                    },
                    attn: blocks::AttentionParams {
                        q: LinearParams { w: detach(&b.attn.q.w), b: detach(&b.attn.q.b) },
                        k: LinearParams { w: detach(&b.attn.k.w), b: detach(&b.attn.k.b) },
                        v: LinearParams { w: detach(&b.attn.v.w), b: detach(&b.attn.v.b) },
                        o: LinearParams { w: detach(&b.attn.o.w), b: detach(&b.attn.o.b) },
                        num_heads: b.attn.num_heads,
                    },
                    norm2: LayerNormParams {
                        gamma: detach(&b.norm2.gamma),
                        beta: detach(&b.norm2.beta),
                        eps: b.norm2.eps,
                    },
                    mlp: blocks::MlpParams {
                        fc1: LinearParams { w: detach(&b.mlp.fc1.w), b: detach(&b.mlp.fc1.b) },
                        fc2: LinearParams { w: detach(&b.mlp.fc2.w), b: detach(&b.mlp.fc2.b) },
                    },
                })
                .collect(),
            norm: LayerNormParams {
                gamma: detach(&self.norm.gamma),
                beta: detach(&self.norm.beta),
                eps: self.norm.eps,
            },
        }
    }
}

/// Everything past the encoder: mask-token reinsertion, the cross-attention
/// decoder, the reconstruction head, and the disparity fusion head. Shared
/// between the student and teacher paths.
#[derive(Clone)]
pub struct Decoder {
    pub mask_token: Param,
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNormParams,
    pub recon: LinearParams,
    pub fusion: FusionParams,
}

impl Decoder {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        let hidden = 4 * cfg.embed_dim;
        Ok(Decoder {
            mask_token: Param::new(
                "dec.mask_token",
                &[cfg.embed_dim],
                blocks::normal_init(rng, cfg.embed_dim, blocks::INIT_STD),
            )?,
            blocks: (0..cfg.decoder_depth)
                .map(|i| {
                    DecoderBlock::init(
                        &format!("dec.block{i}"),
                        cfg.embed_dim,
                        cfg.num_heads,
                        hidden,
                        cfg.ln_eps,
                        rng,
                    )
                })
                .collect(),
            norm: LayerNormParams::init("dec.norm", cfg.embed_dim, cfg.ln_eps),
            recon: LinearParams::init("dec.recon", cfg.embed_dim, cfg.token_dim(), rng),
            fusion: FusionParams::init("dec.fusion", cfg.embed_dim, cfg.patch_size, rng)?,
        })
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = vec![self.mask_token.clone()];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.norm.params());
        p.extend(self.recon.params());
        p.extend(self.fusion.params());
        p
    }
}

pub struct StereoModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl StereoModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let encoder = Encoder::init(&cfg, &mut rng);
        let decoder = Decoder::init(&cfg, &mut rng)?;
        Ok(StereoModel { cfg, encoder, decoder })
    }

    pub fn all_params(&self) -> Vec<Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn num_params(&self) -> usize {
        self.all_params().iter().map(|p| p.numel()).sum()
    }
}

// ── Forward passes ──────────────────────────────────────────────────────────

/// Dense disparity and per-pixel scale, both `[H, W]` on the tape.
pub struct DisparityPrediction {
    pub d: Tensor,
    pub sigma: Tensor,
}

/// Attention weights of one decoder layer, copied off the tape.
/// Both matrices are `[heads, tokens, tokens]` row-major.
pub struct LayerAttention {
    pub self_weights: Vec<f64>,
    pub cross_weights: Vec<f64>,
    pub heads: usize,
    pub tokens: usize,
}

pub struct ForwardOutput {
    pub disparity: DisparityPrediction,
    /// Patch-space reconstructions `[N, token_dim]`, present in full mode.
    pub recon_left: Option<Tensor>,
    pub recon_right: Option<Tensor>,
    /// Left-decoder attention records, one per layer, present in full mode.
    pub attention: Vec<LayerAttention>,
}

#[derive(Clone, Copy, PartialEq)]
pub enum ForwardMode {
    /// Both reconstructions, disparity, and attention records.
    Full,
    /// Disparity head only (the teacher configuration).
    DisparityOnly,
}

fn embed_view(tape: &Tape, enc: &Encoder, cfg: &ModelConfig, img: &[f64], pos: &Tensor) -> Result<Tensor> {
    let toks = patchify(img, cfg.channels, cfg.image_h, cfg.image_w, cfg.patch_size)?;
    let raw = tape.constant(&[cfg.num_patches(), cfg.token_dim()], toks)?;
    enc.patch_embed.apply(tape, &raw)?.add(pos)
}

fn encode_visible(tape: &Tape, enc: &Encoder, tokens: &Tensor, mask: &PatchMask) -> Result<Tensor> {
    if mask.num_patches() != tokens.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: tokens.shape().to_vec(),
            rhs: vec![mask.num_patches()],
        });
    }
    let visible = mask.visible_indices();
    if visible.is_empty() {
        return Err(Error::domain("encode", "no visible tokens"));
    }
    let mut x = tokens.gather_rows(&visible)?;
    for block in &enc.blocks {
        x = block.apply(tape, &x)?.0;
    }
    enc.norm.apply(tape, &x)
}

/// Rebuild the full token grid from visible features: mask tokens fill the
/// hidden positions and positional embeddings are re-added everywhere.
fn reinsert(
    tape: &Tape,
    dec: &Decoder,
    feats: &Tensor,
    mask: &PatchMask,
    pos: &Tensor,
) -> Result<Tensor> {
    let n = mask.num_patches();
    let mut full = feats.scatter_rows(&mask.visible_indices(), n)?;
    if mask.num_masked() > 0 {
        let mt = tape
            .param(&dec.mask_token)
            .broadcast_rows(mask.num_masked())?
            .scatter_rows(&mask.masked_indices(), n)?;
        full = full.add(&mt)?;
    }
    full.add(pos)
}

struct DecodeRun {
    layers: Vec<Tensor>,
    records: Vec<(Tensor, Tensor)>,
}

fn decode_stream(tape: &Tape, dec: &Decoder, x: &Tensor, context: &Tensor) -> Result<DecodeRun> {
    let mut layers = Vec::with_capacity(dec.blocks.len());
    let mut records = Vec::with_capacity(dec.blocks.len());
    let mut x = x.clone();
    for block in &dec.blocks {
        let out = block.apply(tape, &x, context)?;
        x = out.out.clone();
        layers.push(out.out);
        records.push((out.self_weights, out.cross_weights));
    }
    Ok(DecodeRun { layers, records })
}

fn fuse_taps(tape: &Tape, dec: &Decoder, cfg: &ModelConfig, run: &DecodeRun) -> Result<DisparityPrediction> {
    let taps: Vec<Tensor> = cfg.fusion_taps.iter().map(|&t| run.layers[t - 1].clone()).collect();
    let (d, sigma) = dec.fusion.apply(tape, &taps, cfg.grid_h(), cfg.grid_w())?;
    Ok(DisparityPrediction { d, sigma })
}

/// One full forward over a stereo pair with the given encoder weights and
/// the shared decoder. The caller picks masks (empty for the teacher) and
/// the mode.
#[allow(clippy::too_many_arguments)]
pub fn forward_pair(
    tape: &Tape,
    enc: &Encoder,
    dec: &Decoder,
    cfg: &ModelConfig,
    left: &[f64],
    right: &[f64],
    left_mask: &PatchMask,
    right_mask: &PatchMask,
    mode: ForwardMode,
) -> Result<ForwardOutput> {
    let pos = tape.constant(
        &[cfg.num_patches(), cfg.embed_dim],
        pos_embed_2d(cfg.grid_h(), cfg.grid_w(), cfg.embed_dim)?,
    )?;
    let left_tokens = embed_view(tape, enc, cfg, left, &pos)?;
    let right_tokens = embed_view(tape, enc, cfg, right, &pos)?;
    let left_vis = encode_visible(tape, enc, &left_tokens, left_mask)?;
    let right_vis = encode_visible(tape, enc, &right_tokens, right_mask)?;
    let left_full = reinsert(tape, dec, &left_vis, left_mask, &pos)?;
    let right_full = reinsert(tape, dec, &right_vis, right_mask, &pos)?;

    let left_run = decode_stream(tape, dec, &left_full, &right_full)?;
    let disparity = fuse_taps(tape, dec, cfg, &left_run)?;

    if mode == ForwardMode::DisparityOnly {
        return Ok(ForwardOutput { disparity, recon_left: None, recon_right: None, attention: vec![] });
    }

    let right_run = decode_stream(tape, dec, &right_full, &left_full)?;
    let recon_left = dec
        .recon
        .apply(tape, &dec.norm.apply(tape, left_run.layers.last().expect("depth >= 1"))?)?;
    let recon_right = dec
        .recon
        .apply(tape, &dec.norm.apply(tape, right_run.layers.last().expect("depth >= 1"))?)?;
    let attention = left_run
        .records
        .iter()
        .map(|(s, c)| LayerAttention {
            self_weights: s.value(),
            cross_weights: c.value(),
            heads: s.shape()[0],
            tokens: s.shape()[1],
        })
        .collect();
    Ok(ForwardOutput {
        disparity,
        recon_left: Some(recon_left),
        recon_right: Some(recon_right),
        attention,
    })
}

/// Student forward: masked views, reconstructions, disparity, and attention
/// records, all recorded on `tape` for backward.
pub fn forward_student(
    tape: &Tape,
    model: &StereoModel,
    left: &[f64],
    right: &[f64],
    left_mask: &PatchMask,
    right_mask: &PatchMask,
) -> Result<ForwardOutput> {
    forward_pair(
        tape,
        &model.encoder,
        &model.decoder,
        &model.cfg,
        left,
        right,
        left_mask,
        right_mask,
        ForwardMode::Full,
    )
}

/// Dense teacher disparity, produced on a private tape so nothing reaches
/// the caller's gradient graph.
pub struct TeacherPrediction {
    pub d: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Teacher forward: unmasked pair through the given (teacher) encoder and
/// the shared decoder/fusion head, disparity only, gradient-free.
pub fn forward_teacher(
    teacher_encoder: &Encoder,
    model: &StereoModel,
    left: &[f64],
    right: &[f64],
) -> Result<TeacherPrediction> {
    let tape = Tape::new();
    let empty = PatchMask::empty(model.cfg.num_patches());
    let out = forward_pair(
        &tape,
        teacher_encoder,
        &model.decoder,
        &model.cfg,
        left,
        right,
        &empty,
        &empty,
        ForwardMode::DisparityOnly,
    )?;
    Ok(TeacherPrediction { d: out.disparity.d.value(), sigma: out.disparity.sigma.value() })
}
