//! Batch front end: dataset synthesis, training, evaluation, ablation
//! grids, attention analysis, and reconstruction demos. Emits tables and
//! CSVs; exit code 0 on success, 1 on usage errors, 2 on runtime errors.

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use stereomim_core::analysis::collect_and_emit;
use stereomim_core::data::{
    load_dataset, read_pfm, save_dataset, synth_generate, write_image_png, SceneParams,
    StereoSample,
};
use stereomim_core::metrics;
use stereomim_core::model::{
    forward_student, sample_mask, unpatchify, ModelConfig, StereoModel,
};
use stereomim_core::tensor::Tape;
use stereomim_core::trainer::{
    ablate, evaluate, load_checkpoint, train, AblationMode, EvalSummary, TrainConfig,
    TrainSession,
};

#[derive(Parser)]
#[command(name = "stereomim", version, about = "Masked stereo training and analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic stereo dataset split.
    SynthData(SynthArgs),
    /// Train a model, writing checkpoints and a log to --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint or stored predictions over a split.
    Eval(EvalArgs),
    /// Train an ablation grid and write its metric table as CSV.
    Ablate(AblateArgs),
    /// Emit mean cross-attention distance per decoder layer and head.
    AnalyzeAttention(AnalyzeArgs),
    /// Save a side-by-side original / masked / reconstructed image.
    ReconstructDemo(DemoArgs),
}

/// Config file plus per-key overrides. Precedence: flag > file > default.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML config file; keys match the training and model config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    lambda_disp: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_teacher: Option<bool>,
    #[arg(long)]
    pseudo_label_start_step: Option<u64>,
    #[arg(long)]
    negative_log_sigma_term: Option<bool>,
    #[arg(long)]
    recon_abs: Option<bool>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    image_h: Option<usize>,
    #[arg(long)]
    image_w: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    encoder_depth: Option<usize>,
    #[arg(long)]
    decoder_depth: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
}

/// File-config schema: one optional key per config field.
#[derive(serde::Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    lr: Option<f64>,
    weight_decay: Option<f64>,
    warmup_epochs: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    mask_ratio: Option<f64>,
    lambda_disp: Option<f64>,
    alpha: Option<f64>,
    seed: Option<u64>,
    no_teacher: Option<bool>,
    pseudo_label_start_step: Option<u64>,
    loss: Option<FileLoss>,
    eval_every: Option<u64>,
    checkpoint_every: Option<u64>,
    image_h: Option<usize>,
    image_w: Option<usize>,
    channels: Option<usize>,
    patch_size: Option<usize>,
    embed_dim: Option<usize>,
    encoder_depth: Option<usize>,
    decoder_depth: Option<usize>,
    num_heads: Option<usize>,
    fusion_taps: Option<[usize; 4]>,
    ln_eps: Option<f64>,
}

#[derive(serde::Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileLoss {
    negative_log_sigma_term: Option<bool>,
    recon_abs: Option<bool>,
}

fn pick<T: Copy>(dst: &mut T, file: Option<T>, flag: Option<T>) {
    if let Some(v) = file {
        *dst = v;
    }
    if let Some(v) = flag {
        *dst = v;
    }
}

fn resolve_configs(args: &ConfigArgs) -> Result<(ModelConfig, TrainConfig)> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    let file_loss = file.loss.unwrap_or_default();

    let mut train = TrainConfig::default();
    pick(&mut train.lr, file.lr, args.lr);
    pick(&mut train.weight_decay, file.weight_decay, args.weight_decay);
    pick(&mut train.warmup_epochs, file.warmup_epochs, args.warmup_epochs);
    pick(&mut train.epochs, file.epochs, args.epochs);
    pick(&mut train.batch_size, file.batch_size, args.batch_size);
    pick(&mut train.mask_ratio, file.mask_ratio, args.mask_ratio);
    pick(&mut train.lambda_disp, file.lambda_disp, args.lambda_disp);
    pick(&mut train.alpha, file.alpha, args.alpha);
    pick(&mut train.seed, file.seed, args.seed);
    pick(&mut train.no_teacher, file.no_teacher, args.no_teacher);
    pick(
        &mut train.pseudo_label_start_step,
        file.pseudo_label_start_step,
        args.pseudo_label_start_step,
    );
    pick(
        &mut train.loss.negative_log_sigma_term,
        file_loss.negative_log_sigma_term,
        args.negative_log_sigma_term,
    );
    pick(&mut train.loss.recon_abs, file_loss.recon_abs, args.recon_abs);
    pick(&mut train.eval_every, file.eval_every, args.eval_every);
    pick(&mut train.checkpoint_every, file.checkpoint_every, args.checkpoint_every);

    let mut model = ModelConfig::default();
    pick(&mut model.image_h, file.image_h, args.image_h);
    pick(&mut model.image_w, file.image_w, args.image_w);
    pick(&mut model.channels, file.channels, args.channels);
    pick(&mut model.patch_size, file.patch_size, args.patch_size);
    pick(&mut model.embed_dim, file.embed_dim, args.embed_dim);
    pick(&mut model.encoder_depth, file.encoder_depth, args.encoder_depth);
    pick(&mut model.decoder_depth, file.decoder_depth, args.decoder_depth);
    pick(&mut model.num_heads, file.num_heads, args.num_heads);
    // Without explicit taps, respread the defaults over the chosen depth.
    match file.fusion_taps {
        Some(taps) => model.fusion_taps = taps,
        None => model.fusion_taps = ModelConfig::spread_taps(model.decoder_depth),
    }
    pick(&mut model.ln_eps, file.ln_eps, None);
    model.mask_ratio = train.mask_ratio;
    Ok((model, train))
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    num_shapes: usize,
    #[arg(long, default_value_t = 10)]
    max_disparity: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Give layers fractional disparities instead of whole pixels.
    #[arg(long)]
    subpixel: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset root (as written by synth-data).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// Held-out split for periodic evaluation (requires --eval-every).
    #[arg(long)]
    eval_split: Option<String>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["checkpoint", "pred_dir"]))]
struct EvalArgs {
    /// Checkpoint whose model produces the predictions.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of `{index:04}_pred.pfm` files to evaluate instead.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// Split evaluated per arm; defaults to the training split.
    #[arg(long)]
    eval_split: Option<String>,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "mask_ratio_sweep")]
    MaskRatioSweep,
    #[value(name = "ema_toggle")]
    EmaToggle,
    #[value(name = "loss_weight_sweep")]
    LossWeightSweep,
}

impl From<ModeArg> for AblationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::MaskRatioSweep => AblationMode::MaskRatioSweep,
            ModeArg::EmaToggle => AblationMode::EmaToggle,
            ModeArg::LossWeightSweep => AblationMode::LossWeightSweep,
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint to analyze; omitted, a freshly initialized model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint to reconstruct with; omitted, a fresh model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// Sample index within the split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// PNG output path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SynthData(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::AnalyzeAttention(a) => cmd_analyze(a),
        Cmd::ReconstructDemo(a) => cmd_demo(a),
    }
}

fn load_split(root: &Path, split: &str) -> Result<Vec<StereoSample>> {
    let samples = load_dataset(root, split)
        .with_context(|| format!("loading split {split} under {}", root.display()))?;
    if samples.is_empty() {
        bail!("split {split} under {} holds no samples", root.display());
    }
    Ok(samples)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.count == 0 {
        bail!("--count must be positive");
    }
    let params = SceneParams {
        num_shapes: a.num_shapes,
        max_disparity: a.max_disparity,
        subpixel: a.subpixel,
        channels: a.channels,
        ..SceneParams::default()
    };
    let samples: Vec<StereoSample> = (0..a.count)
        .map(|i| synth_generate(a.seed.wrapping_add(i as u64), a.height, a.width, &params))
        .collect::<stereomim_core::Result<_>>()?;
    save_dataset(&a.out, &a.split, &samples)?;
    println!("wrote {} samples to {}", a.count, a.out.join(&a.split).display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (model_cfg, train_cfg) = resolve_configs(&a.cfg)?;
    let train_set = load_split(&a.data, &a.split)?;
    let eval_set = match &a.eval_split {
        Some(split) => load_split(&a.data, split)?,
        None => Vec::new(),
    };
    let outcome = train(&TrainSession {
        model_cfg,
        train_cfg,
        train_set: &train_set,
        eval_set: &eval_set,
        out_dir: Some(a.out.clone()),
        resume: a.resume.clone(),
    })?;
    if let Some(report) = outcome.reports.last() {
        println!(
            "step {} total {:.6} disp {:.6} img_l {:.6} img_r {:.6}",
            report.step, report.l_total, report.l_disp, report.l_img_l, report.l_img_r
        );
    }
    for (step, s) in &outcome.evals {
        println!("eval step {step} avgerr {:.3} rmse {:.3}", s.avgerr, s.rmse);
    }
    let ckpt = outcome.final_checkpoint.expect("out dir was given");
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn print_metric_row(s: &EvalSummary) {
    let mut header = String::from("avgerr,rmse,bad@0.5,bad@1.0,bad@2.0,bad@3.0");
    let mut row = format!(
        "{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
        s.avgerr, s.rmse, s.bad05, s.bad10, s.bad20, s.bad30
    );
    if let Some(d1) = s.d1 {
        header.push_str(",d1");
        row.push_str(&format!(",{d1:.3}"));
    }
    println!("{header}");
    println!("{row}");
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let samples = load_split(&a.data, &a.split)?;
    let summary = if let Some(ckpt_path) = &a.checkpoint {
        let ckpt = load_checkpoint(ckpt_path)?;
        let encoder = ckpt
            .teacher
            .as_ref()
            .map(|t| &t.encoder)
            .unwrap_or(&ckpt.model.encoder);
        evaluate(&ckpt.model, encoder, &samples)?
    } else {
        let dir = a.pred_dir.as_ref().expect("clap group guarantees a source");
        let mut d = Vec::new();
        let mut gt = Vec::new();
        let mut valid = Vec::new();
        for s in &samples {
            let path = dir.join(format!("{:04}_pred.pfm", s.seed));
            let (pred, h, w) = read_pfm(&path)?;
            if (h, w) != (s.h, s.w) {
                bail!(
                    "{}: prediction is {h}x{w}, sample is {}x{}",
                    path.display(),
                    s.h,
                    s.w
                );
            }
            d.extend(pred);
            gt.extend_from_slice(&s.d_gt_dense);
            valid.extend_from_slice(&s.valid);
        }
        EvalSummary {
            avgerr: metrics::avgerr(&d, &gt, &valid)?,
            rmse: metrics::rmse(&d, &gt, &valid)?,
            bad05: metrics::bad_tau(&d, &gt, &valid, 0.5)?,
            bad10: metrics::bad_tau(&d, &gt, &valid, 1.0)?,
            bad20: metrics::bad_tau(&d, &gt, &valid, 2.0)?,
            bad30: metrics::bad_tau(&d, &gt, &valid, 3.0)?,
            d1: metrics::d1(&d, &gt, &valid).ok(),
        }
    };
    print_metric_row(&summary);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let (model_cfg, train_cfg) = resolve_configs(&a.cfg)?;
    let train_set = load_split(&a.data, &a.split)?;
    let eval_set = match &a.eval_split {
        Some(split) => load_split(&a.data, split)?,
        None => train_set.clone(),
    };
    let mode = AblationMode::from(a.mode);
    let rows = ablate(mode, &model_cfg, &train_cfg, &train_set, &eval_set, Some(&a.out))?;
    println!("wrote {} arms to {}", rows.len(), a.out.display());
    if mode == AblationMode::MaskRatioSweep {
        let find = |arm: &str| rows.iter().find(|r| r.arm == arm);
        if let (Some(mid), Some(high)) = (find("0.4"), find("0.9")) {
            println!(
                "avgerr at mask ratio 0.4: {:.3}; at 0.9: {:.3}",
                mid.avgerr, high.avgerr
            );
        }
    }
    Ok(())
}

fn analysis_model(cfg: &ConfigArgs, checkpoint: &Option<PathBuf>) -> Result<StereoModel> {
    match checkpoint {
        Some(path) => Ok(load_checkpoint(path)?.model),
        None => {
            let (model_cfg, train_cfg) = resolve_configs(cfg)?;
            Ok(StereoModel::new(model_cfg, train_cfg.seed)?)
        }
    }
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let samples = load_split(&a.data, &a.split)?;
    let model = analysis_model(&a.cfg, &a.checkpoint)?;
    let rows = collect_and_emit(&model, &samples, &a.out)?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_demo(a: DemoArgs) -> Result<()> {
    let samples = load_split(&a.data, &a.split)?;
    let Some(sample) = samples.get(a.index) else {
        bail!("index {} out of range: split holds {} samples", a.index, samples.len());
    };
    let model = analysis_model(&a.cfg, &a.checkpoint)?;
    let (_, train_cfg) = resolve_configs(&a.cfg)?;
    let cfg = model.cfg.clone();
    if (sample.channels, sample.h, sample.w) != (cfg.channels, cfg.image_h, cfg.image_w) {
        bail!(
            "sample is {}x{}x{}, model expects {}x{}x{}",
            sample.channels,
            sample.h,
            sample.w,
            cfg.channels,
            cfg.image_h,
            cfg.image_w
        );
    }

    let mut rng = ChaCha20Rng::seed_from_u64(train_cfg.seed);
    let mask_l = sample_mask(cfg.num_patches(), train_cfg.mask_ratio, &mut rng)?;
    let mask_r = sample_mask(cfg.num_patches(), train_cfg.mask_ratio, &mut rng)?;
    let tape = Tape::new();
    let out = forward_student(&tape, &model, &sample.left, &sample.right, &mask_l, &mask_r)?;
    let tokens = out.recon_left.as_ref().expect("full mode").value();
    let recon = unpatchify(&tokens, cfg.channels, cfg.image_h, cfg.image_w, cfg.patch_size)?;

    let (c, h, w, p) = (cfg.channels, cfg.image_h, cfg.image_w, cfg.patch_size);
    let grid_w = w / p;
    let mut masked = sample.left.clone();
    let mut pasted = sample.left.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask_l.is_masked((y / p) * grid_w + x / p) {
                continue;
            }
            for ch in 0..c {
                let i = ch * h * w + y * w + x;
                masked[i] = 0.5;
                pasted[i] = recon[i].clamp(0.0, 1.0);
            }
        }
    }

    // One canvas: original | masked | reconstruction pasted into the holes.
    let mut canvas = vec![0.0; c * h * 3 * w];
    for ch in 0..c {
        for y in 0..h {
            let src = ch * h * w + y * w;
            let dst = ch * h * 3 * w + y * 3 * w;
            canvas[dst..dst + w].copy_from_slice(&sample.left[src..src + w]);
            canvas[dst + w..dst + 2 * w].copy_from_slice(&masked[src..src + w]);
            canvas[dst + 2 * w..dst + 3 * w].copy_from_slice(&pasted[src..src + w]);
        }
    }
    write_image_png(&a.out, &canvas, c, h, 3 * w)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
