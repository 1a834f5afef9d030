//! Optimization loop: AdamW, cosine schedule with warmup, checkpointing,
//! evaluation, and the ablation harnesses.

pub mod opt;

use crate::data::StereoSample;
use crate::distill::{
    init_teacher, step_seed, training_step, DistillConfig, StepReport, TeacherState,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics;
use crate::model::{forward_teacher, Encoder, ModelConfig, StereoModel};
use crate::tensor::Param;
use self::opt::AdamW;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::path::{Path, PathBuf};

/// Optimization hyperparameters and harness switches.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of patches masked per student view.
    pub mask_ratio: f64,
    /// Weight of the disparity loss in the total objective.
    pub lambda_disp: f64,
    /// EMA coefficient for the teacher encoder.
    pub alpha: f64,
    pub seed: u64,
    /// Drop the teacher entirely: no pseudo labels, no EMA bookkeeping.
    pub no_teacher: bool,
    /// First step at which pseudo labels join the disparity loss.
    pub pseudo_label_start_step: u64,
    pub loss: LossConfig,
    /// Evaluate on the held-out split every this many steps (0 = never).
    pub eval_every: u64,
    /// Write a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            weight_decay: 0.05,
            warmup_epochs: 1,
            epochs: 10,
            batch_size: 4,
            mask_ratio: 0.4,
            lambda_disp: 1.0,
            alpha: 0.9999,
            seed: 0,
            no_teacher: false,
            pseudo_label_start_step: 0,
            loss: LossConfig::default(),
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive and finite".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config("warmup_epochs must be smaller than epochs".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config("mask_ratio must lie in [0, 1]".into()));
        }
        if !(self.lambda_disp >= 0.0 && self.lambda_disp.is_finite()) {
            return Err(Error::Config("lambda_disp must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn distill(&self) -> DistillConfig {
        DistillConfig {
            mask_ratio: self.mask_ratio,
            lambda_disp: self.lambda_disp,
            pseudo_label_start_step: self.pseudo_label_start_step,
            loss: self.loss,
        }
    }
}

/// Linear warmup from 0 to `lr_max` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, lr_max: f64) -> Result<f64> {
    if total_steps <= warmup_steps {
        return Err(Error::domain("cosine_lr", "total_steps must exceed warmup_steps"));
    }
    if !(lr_max > 0.0 && lr_max.is_finite()) {
        return Err(Error::domain("cosine_lr", "lr_max must be positive"));
    }
    if step < warmup_steps {
        return Ok(lr_max * step as f64 / warmup_steps as f64);
    }
    let progress =
        ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).clamp(0.0, 1.0);
    Ok(lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Pooled metrics over a split: the six Table-style columns plus D1 when
/// every valid ground-truth pixel is positive.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EvalSummary {
    pub avgerr: f64,
    pub rmse: f64,
    pub bad05: f64,
    pub bad10: f64,
    pub bad20: f64,
    pub bad30: f64,
    pub d1: Option<f64>,
}

/// Unmasked disparity inference with the given encoder (EMA weights when a
/// teacher exists, otherwise the student's).
pub fn predict_disparity(
    encoder: &Encoder,
    model: &StereoModel,
    sample: &StereoSample,
) -> Result<Vec<f64>> {
    Ok(forward_teacher(encoder, model, &sample.left, &sample.right)?.d)
}

/// Evaluate over every valid pixel of the split, pooled.
pub fn evaluate(
    model: &StereoModel,
    encoder: &Encoder,
    samples: &[StereoSample],
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::domain("evaluate", "empty split"));
    }
    let mut d = Vec::new();
    let mut gt = Vec::new();
    let mut valid = Vec::new();
    for s in samples {
        d.extend(predict_disparity(encoder, model, s)?);
        gt.extend_from_slice(&s.d_gt_dense);
        valid.extend_from_slice(&s.valid);
    }
    Ok(EvalSummary {
        avgerr: metrics::avgerr(&d, &gt, &valid)?,
        rmse: metrics::rmse(&d, &gt, &valid)?,
        bad05: metrics::bad_tau(&d, &gt, &valid, 0.5)?,
        bad10: metrics::bad_tau(&d, &gt, &valid, 1.0)?,
        bad20: metrics::bad_tau(&d, &gt, &valid, 2.0)?,
        bad30: metrics::bad_tau(&d, &gt, &valid, 3.0)?,
        d1: metrics::d1(&d, &gt, &valid).ok(),
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ParamBlob {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn dump_params(params: &[Param]) -> Vec<ParamBlob> {
    params
        .iter()
        .map(|p| ParamBlob { name: p.name().to_string(), shape: p.shape().to_vec(), values: p.value() })
        .collect()
}

fn restore_params(params: &[Param], blobs: &[ParamBlob], what: &str) -> Result<()> {
    if params.len() != blobs.len() {
        return Err(Error::Format(format!(
            "checkpoint {what}: {} parameters, expected {}",
            blobs.len(),
            params.len()
        )));
    }
    for (p, b) in params.iter().zip(blobs) {
        if p.name() != b.name || p.shape() != b.shape || b.values.len() != p.numel() {
            return Err(Error::Format(format!(
                "checkpoint {what}: parameter {} does not match {}",
                b.name,
                p.name()
            )));
        }
        p.set_value(&b.values)?;
    }
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TeacherBlob {
    alpha: f64,
    params: Vec<ParamBlob>,
}

/// Self-describing training snapshot: configs, every parameter buffer,
/// optimizer moments, teacher weights, and the step counter.
#[derive(serde::Serialize, serde::Deserialize)]
struct Checkpoint {
    version: u32,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    step: u64,
    params: Vec<ParamBlob>,
    opt_t: u64,
    opt_m: Vec<Vec<f64>>,
    opt_v: Vec<Vec<f64>>,
    teacher: Option<TeacherBlob>,
}

const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &StereoModel,
    train_cfg: &TrainConfig,
    optimizer: &AdamW,
    teacher: Option<&TeacherState>,
    step: u64,
) -> Result<()> {
    let path = path.as_ref();
    let (opt_t, m, v) = optimizer.state();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        model_cfg: model.cfg.clone(),
        train_cfg: train_cfg.clone(),
        step,
        params: dump_params(&model.all_params()),
        opt_t,
        opt_m: m.to_vec(),
        opt_v: v.to_vec(),
        teacher: teacher.map(|t| TeacherBlob {
            alpha: t.alpha,
            params: dump_params(&t.encoder.params()),
        }),
    };
    let json = serde_json::to_string(&ckpt)
        .map_err(|e| Error::Format(format!("checkpoint encode: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

/// A checkpoint rebuilt into live training state.
pub struct LoadedCheckpoint {
    pub model: StereoModel,
    pub train_cfg: TrainConfig,
    pub optimizer: AdamW,
    pub teacher: Option<TeacherState>,
    pub step: u64,
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let path = path.as_ref();
    let json =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ckpt: Checkpoint = serde_json::from_str(&json)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            ckpt.version
        )));
    }
    let model = StereoModel::new(ckpt.model_cfg.clone(), ckpt.train_cfg.seed)?;
    restore_params(&model.all_params(), &ckpt.params, "model")?;
    let mut optimizer = AdamW::new(&model.all_params(), ckpt.train_cfg.weight_decay);
    optimizer.restore(ckpt.opt_t, ckpt.opt_m, ckpt.opt_v)?;
    let teacher = match ckpt.teacher {
        Some(tb) => {
            let t = init_teacher(&model.encoder, tb.alpha)?;
            restore_params(&t.encoder.params(), &tb.params, "teacher")?;
            Some(t)
        }
        None => None,
    };
    Ok(LoadedCheckpoint { model, train_cfg: ckpt.train_cfg, optimizer, teacher, step: ckpt.step })
}

/// Inputs to a training run.
pub struct TrainSession<'a> {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub train_set: &'a [StereoSample],
    /// Held-out split for periodic evaluation; may be empty.
    pub eval_set: &'a [StereoSample],
    /// Checkpoint and log directory; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Resume from this checkpoint; its stored configs replace the ones
    /// above so the trajectory continues bit-identically.
    pub resume: Option<PathBuf>,
}

/// A finished run: final weights, teacher, per-step reports of this run,
/// and any periodic evaluations (keyed by completed step count).
pub struct TrainOutcome {
    pub model: StereoModel,
    pub teacher: Option<TeacherState>,
    pub reports: Vec<StepReport>,
    pub evals: Vec<(u64, EvalSummary)>,
    pub final_checkpoint: Option<PathBuf>,
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(step_seed(seed ^ 0x45504f43, epoch));
    idx.shuffle(&mut rng);
    idx
}

/// Run the training loop. Resume state, batch composition, masks, and the
/// schedule are all pure functions of the configs and the step counter, so
/// identical seeds give bit-identical trajectories.
pub fn train(session: &TrainSession) -> Result<TrainOutcome> {
    let resumed = match &session.resume {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let (model, train_cfg, mut optimizer, mut teacher, start_step) = match resumed {
        Some(lc) => (lc.model, lc.train_cfg, lc.optimizer, lc.teacher, lc.step),
        None => {
            session.train_cfg.validate()?;
            session.model_cfg.validate()?;
            let model = StereoModel::new(session.model_cfg.clone(), session.train_cfg.seed)?;
            let teacher = if session.train_cfg.no_teacher {
                None
            } else {
                Some(init_teacher(&model.encoder, session.train_cfg.alpha)?)
            };
            let optimizer = AdamW::new(&model.all_params(), session.train_cfg.weight_decay);
            (model, session.train_cfg.clone(), optimizer, teacher, 0)
        }
    };
    train_cfg.validate()?;
    if session.train_set.is_empty() {
        return Err(Error::domain("train", "empty training set"));
    }
    if let Some(dir) = &session.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    let n = session.train_set.len();
    let steps_per_epoch = n.div_ceil(train_cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * train_cfg.epochs as u64;
    let warmup_steps = steps_per_epoch * train_cfg.warmup_epochs as u64;
    if start_step > total_steps {
        return Err(Error::domain("train", "checkpoint is past the configured schedule"));
    }

    let distill_cfg = train_cfg.distill();
    let mut reports = Vec::new();
    let mut evals = Vec::new();
    let mut log_lines: Vec<String> = Vec::new();
    let mut current_epoch = u64::MAX;
    let mut shuffled: Vec<StereoSample> = Vec::new();

    for step in start_step..total_steps {
        let epoch = step / steps_per_epoch;
        if epoch != current_epoch {
            shuffled = epoch_order(train_cfg.seed, epoch, n)
                .into_iter()
                .map(|i| session.train_set[i].clone())
                .collect();
            current_epoch = epoch;
        }
        let pos = (step % steps_per_epoch) as usize;
        let lo = pos * train_cfg.batch_size;
        let hi = (lo + train_cfg.batch_size).min(n);
        let lr = cosine_lr(step, total_steps, warmup_steps, train_cfg.lr)?;
        let report = training_step(
            &model,
            teacher.as_mut(),
            &mut optimizer,
            &shuffled[lo..hi],
            &distill_cfg,
            lr,
            step,
            train_cfg.seed,
        )?;
        log_lines.push(format!(
            "step {} lr {:.6e} total {:.6} disp {:.6} img_l {:.6} img_r {:.6} grad_norm {:.6}",
            report.step, report.lr, report.l_total, report.l_disp, report.l_img_l,
            report.l_img_r, report.grad_norm
        ));
        reports.push(report);

        let done = step + 1;
        if train_cfg.eval_every > 0 && done % train_cfg.eval_every == 0 && !session.eval_set.is_empty()
        {
            let encoder = teacher.as_ref().map(|t| &t.encoder).unwrap_or(&model.encoder);
            let summary = evaluate(&model, encoder, session.eval_set)?;
            log_lines.push(format!(
                "eval step {} avgerr {:.6} rmse {:.6} bad@0.5 {:.4} bad@1.0 {:.4} bad@2.0 {:.4} bad@3.0 {:.4}",
                done, summary.avgerr, summary.rmse, summary.bad05, summary.bad10,
                summary.bad20, summary.bad30
            ));
            evals.push((done, summary));
        }
        if let Some(dir) = &session.out_dir {
            if train_cfg.checkpoint_every > 0 && done % train_cfg.checkpoint_every == 0 {
                save_checkpoint(
                    dir.join(format!("ckpt_{done:06}.json")),
                    &model,
                    &train_cfg,
                    &optimizer,
                    teacher.as_ref(),
                    done,
                )?;
            }
        }
    }

    let mut final_checkpoint = None;
    if let Some(dir) = &session.out_dir {
        let path = dir.join("ckpt_final.json");
        save_checkpoint(&path, &model, &train_cfg, &optimizer, teacher.as_ref(), total_steps)?;
        final_checkpoint = Some(path);
        let log_path = dir.join("train.log");
        std::fs::write(&log_path, log_lines.join("\n") + "\n")
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    }
    Ok(TrainOutcome { model, teacher, reports, evals, final_checkpoint })
}

/// Which ablation family to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Mask ratio β from 0.1 to 0.9 in steps of 0.1.
    MaskRatioSweep,
    /// Teacher distillation off versus on.
    EmaToggle,
    /// λ_disp over {0.1, 0.3, 0.5, 0.7, 1.0}.
    LossWeightSweep,
}

/// One trained arm's pooled metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    pub avgerr: f64,
    pub rmse: f64,
    pub bad05: f64,
    pub bad10: f64,
    pub bad20: f64,
    pub bad30: f64,
}

/// Train one arm per grid point with shared seeds and report the six metric
/// columns on the eval split. Writes CSV when `out_csv` is given.
pub fn ablate(
    mode: AblationMode,
    model_cfg: &ModelConfig,
    base_cfg: &TrainConfig,
    train_set: &[StereoSample],
    eval_set: &[StereoSample],
    out_csv: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    base_cfg.validate()?;
    let arms: Vec<(String, TrainConfig)> = match mode {
        AblationMode::MaskRatioSweep => (1..=9)
            .map(|i| {
                let ratio = i as f64 / 10.0;
                (format!("{ratio:.1}"), TrainConfig { mask_ratio: ratio, ..base_cfg.clone() })
            })
            .collect(),
        AblationMode::EmaToggle => vec![
            ("ema_off".to_string(), TrainConfig { no_teacher: true, ..base_cfg.clone() }),
            ("ema_on".to_string(), TrainConfig { no_teacher: false, ..base_cfg.clone() }),
        ],
        AblationMode::LossWeightSweep => [0.1, 0.3, 0.5, 0.7, 1.0]
            .iter()
            .map(|&l| {
                (format!("{l:.1}"), TrainConfig { lambda_disp: l, ..base_cfg.clone() })
            })
            .collect(),
    };

    let mut rows = Vec::with_capacity(arms.len());
    for (arm, cfg) in arms {
        let outcome = train(&TrainSession {
            model_cfg: model_cfg.clone(),
            train_cfg: cfg,
            train_set,
            eval_set,
            out_dir: None,
            resume: None,
        })?;
        let encoder = outcome
            .teacher
            .as_ref()
            .map(|t| &t.encoder)
            .unwrap_or(&outcome.model.encoder);
        let s = evaluate(&outcome.model, encoder, eval_set)?;
        rows.push(AblationRow {
            arm,
            avgerr: s.avgerr,
            rmse: s.rmse,
            bad05: s.bad05,
            bad10: s.bad10,
            bad20: s.bad20,
            bad30: s.bad30,
        });
    }

    if let Some(path) = out_csv {
        let mut csv = String::from("arm,avgerr,rmse,bad@0.5,bad@1.0,bad@2.0,bad@3.0\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.arm, r.avgerr, r.rmse, r.bad05, r.bad10, r.bad20, r.bad30
            ));
        }
        std::fs::write(path, csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(rows)
}
