//! Training objectives: the gated Laplacian disparity loss, the masked
//! reconstruction loss, and their weighted total.

use crate::error::{Error, Result};
use crate::model::{patchify, DisparityPrediction, ModelConfig, PatchMask};
use crate::tensor::{Tape, Tensor};

/// Switches for loss variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Use `-2 log σ` instead of the default `+2 log σ` in the disparity
    /// loss. The default is the proper Laplacian negative log-likelihood,
    /// minimized at σ = residual/2; the flipped sign is unbounded below.
    pub negative_log_sigma_term: bool,
    /// Use absolute instead of squared per-pixel error in the
    /// reconstruction loss.
    pub recon_abs: bool,
}

/// Supervision for one sample: sparse ground truth plus a dense pseudo
/// disparity map covering every pixel.
#[derive(Debug, Clone)]
pub struct SupervisionBundle {
    pub d_gt: Vec<f64>,
    pub gt_valid: Vec<bool>,
    pub d_pgt: Vec<f64>,
}

/// Laplacian negative log-likelihood over all pixels, each supervised by
/// ground truth where available and by the pseudo label elsewhere:
/// `(1/|Ω|)·Σ_i (|d_i − target_i| / σ_i + 2 log σ_i)`.
pub fn disparity_loss(
    tape: &Tape,
    pred: &DisparityPrediction,
    sup: &SupervisionBundle,
    opts: &LossConfig,
) -> Result<Tensor> {
    let shape = pred.d.shape().to_vec();
    let n = pred.d.numel();
    if n == 0 {
        return Err(Error::domain("disparity_loss", "empty pixel set"));
    }
    if pred.sigma.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "disparity_loss",
            lhs: shape,
            rhs: pred.sigma.shape().to_vec(),
        });
    }
    if sup.d_gt.len() != n || sup.gt_valid.len() != n || sup.d_pgt.len() != n {
        return Err(Error::ShapeMismatch {
            op: "disparity_loss",
            lhs: shape,
            rhs: vec![sup.d_gt.len(), sup.gt_valid.len(), sup.d_pgt.len()],
        });
    }
    if pred.sigma.value().iter().any(|&s| s <= 0.0) {
        return Err(Error::domain("disparity_loss", "sigma must be positive everywhere"));
    }
    if sup.d_pgt.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pseudo disparity map".into()));
    }
    if sup.gt_valid.iter().zip(&sup.d_gt).any(|(&v, g)| v && !g.is_finite()) {
        return Err(Error::NonFinite("ground-truth disparity on valid pixels".into()));
    }

    // Ground-truth values outside the valid set never enter the loss; zero
    // placeholders keep non-finite garbage from poisoning gated-out terms.
    let gt_clean: Vec<f64> = sup
        .d_gt
        .iter()
        .zip(&sup.gt_valid)
        .map(|(&g, &v)| if v { g } else { 0.0 })
        .collect();
    let gt_gate: Vec<f64> = sup.gt_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let pgt_gate: Vec<f64> = sup.gt_valid.iter().map(|&v| if v { 0.0 } else { 1.0 }).collect();

    let d_gt = tape.constant(&shape, gt_clean)?;
    let d_pgt = tape.constant(&shape, sup.d_pgt.clone())?;
    let g = tape.constant(&shape, gt_gate)?;
    let p = tape.constant(&shape, pgt_gate)?;

    let gt_term = pred.d.sub(&d_gt)?.abs()?.div(&pred.sigma)?.mul(&g)?;
    let pgt_term = pred.d.sub(&d_pgt)?.abs()?.div(&pred.sigma)?.mul(&p)?;
    let log_sign = if opts.negative_log_sigma_term { -2.0 } else { 2.0 };
    let log_term = pred.sigma.log()?.mul_scalar(log_sign)?;
    gt_term
        .add(&pgt_term)?
        .add(&log_term)?
        .sum()?
        .mul_scalar(1.0 / n as f64)
}

/// Disparity loss without pseudo supervision: only ground-truth pixels
/// contribute, still normalized by the full pixel count:
/// `(1/|Ω|)·Σ_{i∈G} (|d_i − d_gt_i| / σ_i + 2 log σ_i)`.
pub fn disparity_loss_gt_only(
    tape: &Tape,
    pred: &DisparityPrediction,
    d_gt: &[f64],
    gt_valid: &[bool],
    opts: &LossConfig,
) -> Result<Tensor> {
    let shape = pred.d.shape().to_vec();
    let n = pred.d.numel();
    if n == 0 {
        return Err(Error::domain("disparity_loss", "empty pixel set"));
    }
    if pred.sigma.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "disparity_loss",
            lhs: shape,
            rhs: pred.sigma.shape().to_vec(),
        });
    }
    if d_gt.len() != n || gt_valid.len() != n {
        return Err(Error::ShapeMismatch {
            op: "disparity_loss",
            lhs: shape,
            rhs: vec![d_gt.len(), gt_valid.len()],
        });
    }
    if pred.sigma.value().iter().any(|&s| s <= 0.0) {
        return Err(Error::domain("disparity_loss", "sigma must be positive everywhere"));
    }
    if gt_valid.iter().zip(d_gt).any(|(&v, g)| v && !g.is_finite()) {
        return Err(Error::NonFinite("ground-truth disparity on valid pixels".into()));
    }
    let gt_clean: Vec<f64> =
        d_gt.iter().zip(gt_valid).map(|(&g, &v)| if v { g } else { 0.0 }).collect();
    let gate: Vec<f64> = gt_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let target = tape.constant(&shape, gt_clean)?;
    let g = tape.constant(&shape, gate)?;
    let log_sign = if opts.negative_log_sigma_term { -2.0 } else { 2.0 };
    let residual = pred.d.sub(&target)?.abs()?.div(&pred.sigma)?;
    let log_term = pred.sigma.log()?.mul_scalar(log_sign)?;
    residual
        .add(&log_term)?
        .mul(&g)?
        .sum()?
        .mul_scalar(1.0 / n as f64)
}

/// Mean per-pixel reconstruction error over the masked patches only:
/// `(1/N_m)·Σ_{masked pixels} ‖Î(i) − I(i)‖²` (or the absolute variant).
/// Returns 0 when no patches are masked.
pub fn recon_loss(
    tape: &Tape,
    recon_tokens: &Tensor,
    image: &[f64],
    mask: &PatchMask,
    cfg: &ModelConfig,
    opts: &LossConfig,
) -> Result<Tensor> {
    let expect = [cfg.num_patches(), cfg.token_dim()];
    if recon_tokens.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            lhs: recon_tokens.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    if mask.num_patches() != cfg.num_patches() {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            lhs: vec![mask.num_patches()],
            rhs: vec![cfg.num_patches()],
        });
    }
    if mask.num_masked() == 0 {
        return Ok(tape.scalar(0.0));
    }
    let target = patchify(image, cfg.channels, cfg.image_h, cfg.image_w, cfg.patch_size)?;
    let target = tape.constant(&expect, target)?;
    let idx = mask.masked_indices();
    let diff = recon_tokens.gather_rows(&idx)?.sub(&target.gather_rows(&idx)?)?;
    let per_value = if opts.recon_abs { diff.abs()? } else { diff.mul(&diff)? };
    let masked_pixels = mask.num_masked() * cfg.patch_size * cfg.patch_size;
    per_value.sum()?.mul_scalar(1.0 / masked_pixels as f64)
}

/// `L_img_left + L_img_right + λ·L_disp`.
pub fn total_loss(
    l_disp: &Tensor,
    l_img_left: &Tensor,
    l_img_right: &Tensor,
    lambda_disp: f64,
) -> Result<Tensor> {
    for (name, t) in [("L_disp", l_disp), ("L_img_left", l_img_left), ("L_img_right", l_img_right)] {
        if !t.item()?.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    if !lambda_disp.is_finite() {
        return Err(Error::NonFinite("lambda_disp".into()));
    }
    l_img_left.add(l_img_right)?.add(&l_disp.mul_scalar(lambda_disp)?)
}
