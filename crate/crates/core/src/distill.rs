//! Teacher-student orchestration: EMA encoder updates, pseudo-disparity
//! generation, and the combined masked-reconstruction + disparity training
//! step.

use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::losses::{
    disparity_loss, disparity_loss_gt_only, recon_loss, total_loss, LossConfig,
    SupervisionBundle,
};
use crate::model::{
    forward_student, forward_teacher, sample_mask, Encoder, PatchMask, StereoModel,
    TeacherPrediction,
};
use crate::tensor::{Tape, Tensor};
use crate::trainer::opt::{global_grad_norm, AdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// The teacher's own encoder weights plus the EMA coefficient. The decoder
/// and prediction heads are shared with the student, not averaged.
pub struct TeacherState {
    pub encoder: Encoder,
    pub alpha: f64,
}

/// Deep-copy the student encoder as the teacher's starting point.
pub fn init_teacher(student: &Encoder, alpha: f64) -> Result<TeacherState> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain("init_teacher", "alpha must lie in [0, 1]"));
    }
    Ok(TeacherState { encoder: student.deep_copy(), alpha })
}

/// `θ_teacher ← α·θ_teacher + (1−α)·θ_student`, element-wise over every
/// encoder parameter.
pub fn ema_update(teacher: &mut TeacherState, student: &Encoder) -> Result<()> {
    let t_params = teacher.encoder.params();
    let s_params = student.params();
    if t_params.len() != s_params.len() {
        return Err(Error::ShapeMismatch {
            op: "ema_update",
            lhs: vec![t_params.len()],
            rhs: vec![s_params.len()],
        });
    }
    let alpha = teacher.alpha;
    for (t, s) in t_params.iter().zip(&s_params) {
        if t.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                lhs: t.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let sv = s.value();
        t.update_value(|tv, _| {
            for j in 0..tv.len() {
                tv[j] = alpha * tv[j] + (1.0 - alpha) * sv[j];
            }
        });
    }
    Ok(())
}

/// Per-step knobs of the distillation loop.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DistillConfig {
    /// Fraction of patches masked in each student view.
    pub mask_ratio: f64,
    /// Weight of the disparity loss against the two reconstruction losses.
    pub lambda_disp: f64,
    /// First step at which teacher pseudo labels join the disparity loss.
    pub pseudo_label_start_step: u64,
    pub loss: LossConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            mask_ratio: 0.4,
            lambda_disp: 1.0,
            pseudo_label_start_step: 0,
            loss: LossConfig::default(),
        }
    }
}

/// Independent per-step RNG stream derived from the run seed.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x243f_6a88_85a3_08d3);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scalar outcome of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub l_total: f64,
    pub l_disp: f64,
    pub l_img_l: f64,
    pub l_img_r: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

fn check_sample(model: &StereoModel, s: &StereoSample) -> Result<()> {
    let cfg = &model.cfg;
    if (s.channels, s.h, s.w) != (cfg.channels, cfg.image_h, cfg.image_w) {
        return Err(Error::ShapeMismatch {
            op: "training_step",
            lhs: vec![s.channels, s.h, s.w],
            rhs: vec![cfg.channels, cfg.image_h, cfg.image_w],
        });
    }
    Ok(())
}

/// One combined step: teacher pseudo labels, masked student forward, loss
/// assembly, backward, optimizer update, then the EMA teacher update.
/// `teacher: None` drops pseudo supervision entirely (the no-teacher
/// ablation arm). Deterministic given (seed, step) and the entering state.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    model: &StereoModel,
    teacher: Option<&mut TeacherState>,
    opt: &mut AdamW,
    batch: &[StereoSample],
    cfg: &DistillConfig,
    lr: f64,
    step: u64,
    seed: u64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::domain("training_step", "empty batch"));
    }
    for s in batch {
        check_sample(model, s)?;
    }
    let n_patches = model.cfg.num_patches();
    let use_pseudo = teacher.is_some() && step >= cfg.pseudo_label_start_step;

    let pseudo: Vec<Option<TeacherPrediction>> = if use_pseudo {
        let t = teacher.as_deref().expect("teacher present");
        batch
            .iter()
            .map(|s| forward_teacher(&t.encoder, model, &s.left, &s.right).map(Some))
            .collect::<Result<_>>()?
    } else {
        batch.iter().map(|_| None).collect()
    };

    let mut rng = ChaCha20Rng::seed_from_u64(step_seed(seed, step));
    let masks: Vec<(PatchMask, PatchMask)> = batch
        .iter()
        .map(|_| {
            Ok((
                sample_mask(n_patches, cfg.mask_ratio, &mut rng)?,
                sample_mask(n_patches, cfg.mask_ratio, &mut rng)?,
            ))
        })
        .collect::<Result<_>>()?;

    let tape = Tape::new();
    let mut sum: Option<(Tensor, Tensor, Tensor)> = None;
    for (i, s) in batch.iter().enumerate() {
        let out = forward_student(&tape, model, &s.left, &s.right, &masks[i].0, &masks[i].1)?;
        let l_disp = match &pseudo[i] {
            Some(p) => {
                let sup = SupervisionBundle {
                    d_gt: s.d_gt_dense.clone(),
                    gt_valid: s.valid.clone(),
                    d_pgt: p.d.clone(),
                };
                disparity_loss(&tape, &out.disparity, &sup, &cfg.loss)?
            }
            None => {
                disparity_loss_gt_only(&tape, &out.disparity, &s.d_gt_dense, &s.valid, &cfg.loss)?
            }
        };
        let recon_left = out.recon_left.as_ref().expect("full mode");
        let recon_right = out.recon_right.as_ref().expect("full mode");
        let l_img_l = recon_loss(&tape, recon_left, &s.left, &masks[i].0, &model.cfg, &cfg.loss)?;
        let l_img_r = recon_loss(&tape, recon_right, &s.right, &masks[i].1, &model.cfg, &cfg.loss)?;
        sum = Some(match sum {
            None => (l_disp, l_img_l, l_img_r),
            Some((d, l, r)) => (d.add(&l_disp)?, l.add(&l_img_l)?, r.add(&l_img_r)?),
        });
    }
    let (d_sum, l_sum, r_sum) = sum.expect("non-empty batch");
    let inv = 1.0 / batch.len() as f64;
    let l_disp = d_sum.mul_scalar(inv)?;
    let l_img_l = l_sum.mul_scalar(inv)?;
    let l_img_r = r_sum.mul_scalar(inv)?;
    let l_total = total_loss(&l_disp, &l_img_l, &l_img_r, cfg.lambda_disp)
        .map_err(|e| Error::domain("training_step", format!("step {step}: {e}")))?;

    let report_partial = (
        l_total.item()?,
        l_disp.item()?,
        l_img_l.item()?,
        l_img_r.item()?,
    );

    let params = model.all_params();
    for p in &params {
        p.zero_grad();
    }
    tape.backward(&l_total)?;
    let grad_norm = global_grad_norm(&params);
    opt.step(&params, lr)
        .map_err(|e| Error::domain("training_step", format!("step {step}: {e}")))?;

    if let Some(t) = teacher {
        ema_update(t, &model.encoder)?;
    }

    Ok(StepReport {
        step,
        l_total: report_partial.0,
        l_disp: report_partial.1,
        l_img_l: report_partial.2,
        l_img_r: report_partial.3,
        grad_norm,
        lr,
    })
}
