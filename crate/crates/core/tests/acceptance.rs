//! Acceptance gate: one test per shipping criterion, each printing a single
//! PASS/FAIL line (visible with `--nocapture`) before asserting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::time::Instant;
use stereomim_core::data::{synth_generate, SceneParams, StereoSample};
use stereomim_core::distill::{ema_update, init_teacher, DistillConfig};
use stereomim_core::losses::{
    disparity_loss, recon_loss, total_loss, LossConfig, SupervisionBundle,
};
use stereomim_core::metrics::{avgerr, bad_tau, d1, rmse};
use stereomim_core::model::{
    forward_student, forward_teacher, sample_mask, DisparityPrediction, ModelConfig, PatchMask,
    StereoModel,
};
use stereomim_core::tensor::{Param, Tape, Tensor};
use stereomim_core::trainer::{
    ablate, evaluate, train, AblationMode, TrainConfig, TrainSession,
};
use stereomim_core::Result;

fn verdict(num: u32, name: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    println!("criterion {num:02} ({name}): {status} [{detail}]");
    assert!(ok, "criterion {num:02} ({name}): {detail}");
}

fn toy_sample(seed: u64) -> StereoSample {
    let cfg = ModelConfig::toy();
    let params = SceneParams { max_disparity: 8, ..SceneParams::default() };
    synth_generate(seed, cfg.image_h, cfg.image_w, &params).unwrap()
}

fn toy_set(n: u64) -> Vec<StereoSample> {
    (0..n).map(toy_sample).collect()
}

fn fixed_masks(cfg: &ModelConfig, seed: u64, ratio: f64) -> (PatchMask, PatchMask) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = cfg.num_patches();
    (sample_mask(n, ratio, &mut rng).unwrap(), sample_mask(n, ratio, &mut rng).unwrap())
}

/// Full objective for one sample with pseudo labels held fixed, exactly as
/// the training step assembles it.
fn build_total_loss(
    model: &StereoModel,
    s: &StereoSample,
    masks: &(PatchMask, PatchMask),
    d_pgt: &[f64],
) -> Result<(Tape, Tensor)> {
    let tape = Tape::new();
    let out = forward_student(&tape, model, &s.left, &s.right, &masks.0, &masks.1)?;
    let sup = SupervisionBundle {
        d_gt: s.d_gt_dense.clone(),
        gt_valid: s.valid.clone(),
        d_pgt: d_pgt.to_vec(),
    };
    let opts = LossConfig::default();
    let l_disp = disparity_loss(&tape, &out.disparity, &sup, &opts)?;
    let l_l = recon_loss(&tape, out.recon_left.as_ref().unwrap(), &s.left, &masks.0, &model.cfg, &opts)?;
    let l_r = recon_loss(&tape, out.recon_right.as_ref().unwrap(), &s.right, &masks.1, &model.cfg, &opts)?;
    let total = total_loss(&l_disp, &l_l, &l_r, 1.0)?;
    Ok((tape, total))
}

fn grads_of(params: &[Param]) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.grad()).collect()
}

fn bits(values: &[Vec<f64>]) -> Vec<Vec<u64>> {
    values.iter().map(|v| v.iter().map(|x| x.to_bits()).collect()).collect()
}

// ── 1. Gradient soundness ───────────────────────────────────────────────────

#[test]
fn criterion_01_gradient_soundness() {
    let started = Instant::now();
    let cfg = ModelConfig::toy();
    let seeds = 20u64;
    let coords_per_seed = 16usize;
    // Each coordinate is checked at two step sizes with Richardson
    // extrapolation and must agree at one of them. Small steps lose accuracy
    // to cancellation noise in the loss difference; large steps can straddle
    // an absolute-value kink of the disparity term. A real gradient defect
    // mismatches at every scale, so taking the better scale keeps the check
    // sharp without tripping on finite-difference physics. The floor turns
    // the relative tolerance into an absolute one (1e-8) for coordinates
    // whose gradient sits below what the difference quotient can resolve
    // against an O(1) loss.
    let scales = [1e-6, 1e-5];
    let floor = 1e-4;
    let mut max_rel: f64 = 0.0;

    for seed in 0..seeds {
        let model = StereoModel::new(cfg.clone(), seed).unwrap();
        let teacher = init_teacher(&model.encoder, 0.9999).unwrap();
        let s = toy_sample(seed);
        let masks = fixed_masks(&cfg, seed ^ 0xA5A5, 0.4);
        let pgt = forward_teacher(&teacher.encoder, &model, &s.left, &s.right).unwrap().d;

        let params = model.all_params();
        let (tape, loss) = build_total_loss(&model, &s, &masks, &pgt).unwrap();
        for p in &params {
            p.zero_grad();
        }
        tape.backward(&loss).unwrap();
        let analytic = grads_of(&params);

        let loss_at = || build_total_loss(&model, &s, &masks, &pgt).unwrap().1.item().unwrap();
        let total: usize = params.iter().map(|p| p.numel()).sum();
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5EED);
        for _ in 0..coords_per_seed {
            let mut flat = rng.gen_range(0..total);
            let mut pi = 0;
            while flat >= params[pi].numel() {
                flat -= params[pi].numel();
                pi += 1;
            }
            let p = &params[pi];
            let orig = p.value()[flat];
            let central = |h: f64| {
                p.update_value(|v, _| v[flat] = orig + h);
                let plus = loss_at();
                p.update_value(|v, _| v[flat] = orig - h);
                let minus = loss_at();
                p.update_value(|v, _| v[flat] = orig);
                (plus - minus) / (2.0 * h)
            };
            let a = analytic[pi][flat];
            let rel = scales
                .iter()
                .map(|&eps| {
                    let extrapolated = (4.0 * central(eps) - central(2.0 * eps)) / 3.0;
                    (a - extrapolated).abs() / a.abs().max(extrapolated.abs()).max(floor)
                })
                .fold(f64::INFINITY, f64::min);
            max_rel = max_rel.max(rel);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient soundness",
        max_rel < 1e-4 && elapsed < 120.0,
        &format!("{seeds} seeds x {coords_per_seed} coords, max rel err {max_rel:.2e}, {elapsed:.1}s"),
    );
}

// ── 2. EMA geometric decay ──────────────────────────────────────────────────

#[test]
fn criterion_02_ema_geometric_decay() {
    let cfg = ModelConfig::toy();
    let student = StereoModel::new(cfg.clone(), 100).unwrap();
    let start = StereoModel::new(cfg, 101).unwrap();
    let k = 7;
    let mut max_dev: f64 = 0.0;
    for alpha in [0.0, 0.5, 0.9, 0.9999] {
        let mut teacher = init_teacher(&start.encoder, alpha).unwrap();
        let t0: Vec<Vec<f64>> = teacher.encoder.params().iter().map(|p| p.value()).collect();
        for _ in 0..k {
            ema_update(&mut teacher, &student.encoder).unwrap();
        }
        let factor = alpha.powi(k);
        for ((t, s), t0) in teacher
            .encoder
            .params()
            .iter()
            .zip(&student.encoder.params())
            .zip(&t0)
        {
            let (tv, sv) = (t.value(), s.value());
            for j in 0..tv.len() {
                let expect = sv[j] + factor * (t0[j] - sv[j]);
                max_dev = max_dev.max((tv[j] - expect).abs());
            }
        }
    }
    let default_alpha = TrainConfig::default().alpha;
    verdict(
        2,
        "ema geometric decay",
        max_dev < 1e-10 && default_alpha == 0.9999,
        &format!("max deviation {max_dev:.2e} after {k} updates, shipped alpha {default_alpha}"),
    );
}

// ── 3. Supervision gating ───────────────────────────────────────────────────

#[test]
fn criterion_03_pseudo_label_gating() {
    // Pseudo labels on ground-truth pixels are inert through the whole model.
    let cfg = ModelConfig::toy();
    let model = StereoModel::new(cfg.clone(), 41).unwrap();
    let other = StereoModel::new(cfg.clone(), 42).unwrap();
    let teacher = init_teacher(&other.encoder, 0.9999).unwrap();
    let s = toy_sample(3);
    let masks = fixed_masks(&cfg, 7, 0.4);
    let pgt = forward_teacher(&teacher.encoder, &model, &s.left, &s.right).unwrap().d;
    let params = model.all_params();

    let run = |d_pgt: &[f64]| {
        let (tape, loss) = build_total_loss(&model, &s, &masks, d_pgt).unwrap();
        for p in &params {
            p.zero_grad();
        }
        tape.backward(&loss).unwrap();
        (loss.item().unwrap(), grads_of(&params))
    };
    let (base_loss, base_grads) = run(&pgt);
    let mut poked = pgt.clone();
    for (i, v) in poked.iter_mut().enumerate() {
        if s.valid[i] {
            *v += 1000.0 + i as f64;
        }
    }
    let (poked_loss, poked_grads) = run(&poked);
    let loss_inert = poked_loss.to_bits() == base_loss.to_bits();
    let grads_inert = bits(&poked_grads) == bits(&base_grads);

    // Each pixel draws from exactly one source: flipping its validity moves
    // the loss by precisely the difference of the two per-pixel terms.
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let n = 64;
    let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
    let d_gt: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let d_pgt: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let eval = |valid: &[bool]| {
        let tape = Tape::new();
        let pred = DisparityPrediction {
            d: tape.constant(&[8, 8], d.clone()).unwrap(),
            sigma: tape.constant(&[8, 8], sigma.clone()).unwrap(),
        };
        let sup = SupervisionBundle {
            d_gt: d_gt.clone(),
            gt_valid: valid.to_vec(),
            d_pgt: d_pgt.clone(),
        };
        disparity_loss(&tape, &pred, &sup, &LossConfig::default()).unwrap().item().unwrap()
    };
    let base = eval(&valid);
    let mut max_partition_err: f64 = 0.0;
    for i in 0..n {
        let mut flipped = valid.clone();
        flipped[i] = !flipped[i];
        let gt_term = (d[i] - d_gt[i]).abs() / sigma[i];
        let pgt_term = (d[i] - d_pgt[i]).abs() / sigma[i];
        let delta = if flipped[i] { gt_term - pgt_term } else { pgt_term - gt_term };
        let got = eval(&flipped) - base;
        max_partition_err = max_partition_err.max((got - delta / n as f64).abs());
    }
    verdict(
        3,
        "pseudo label gating",
        loss_inert && grads_inert && max_partition_err < 1e-12,
        &format!(
            "loss inert {loss_inert}, grads inert {grads_inert}, partition err {max_partition_err:.2e}"
        ),
    );
}

// ── 4. Stop-gradient through the teacher ────────────────────────────────────

#[test]
fn criterion_04_teacher_stop_gradient() {
    let cfg = ModelConfig::toy();
    let model = StereoModel::new(cfg.clone(), 43).unwrap();
    let other = StereoModel::new(cfg.clone(), 44).unwrap();
    let teacher = init_teacher(&other.encoder, 0.9999).unwrap();
    let s = toy_sample(5);
    let masks = fixed_masks(&cfg, 11, 0.4);

    // The teacher call records nothing on the caller's tape.
    let tape = Tape::new();
    let before = tape.len();
    let pred = forward_teacher(&teacher.encoder, &model, &s.left, &s.right).unwrap();
    let tape_untouched = tape.len() == before;

    // Routing the pseudo labels through an explicit bit-level round trip
    // (injecting unquestionable constants) changes nothing anywhere.
    let params = model.all_params();
    let run = |d_pgt: &[f64]| {
        let (tape, loss) = build_total_loss(&model, &s, &masks, d_pgt).unwrap();
        for p in &params {
            p.zero_grad();
        }
        tape.backward(&loss).unwrap();
        (loss.item().unwrap().to_bits(), bits(&grads_of(&params)))
    };
    let direct = run(&pred.d);
    let constants: Vec<f64> =
        pred.d.iter().map(|v| f64::from_bits(v.to_bits())).collect();
    let injected = run(&constants);
    let identical = direct == injected;

    // No gradient ever reaches the teacher's weights.
    let teacher_grads_zero = teacher
        .encoder
        .params()
        .iter()
        .all(|p| p.grad().iter().all(|&g| g == 0.0));

    verdict(
        4,
        "teacher stop gradient",
        tape_untouched && identical && teacher_grads_zero,
        &format!(
            "tape untouched {tape_untouched}, constants injection identical {identical}, teacher grads zero {teacher_grads_zero}"
        ),
    );
}

// ── 5. Shared decoder, private encoder ──────────────────────────────────────

#[test]
fn criterion_05_siamese_weight_sharing() {
    let cfg = ModelConfig::toy();
    let model = StereoModel::new(cfg, 47).unwrap();
    let mut teacher = init_teacher(&model.encoder, 0.5).unwrap();
    let s = toy_sample(6);

    // The teacher owns exactly an encoder copy: same parameter table as the
    // student encoder, none of it aliased.
    let t_params = teacher.encoder.params();
    let s_enc = model.encoder.params();
    let copy_shape_ok = t_params.len() == s_enc.len()
        && t_params.iter().zip(&s_enc).all(|(t, s)| t.shape() == s.shape());
    let unaliased = t_params.iter().zip(&s_enc).all(|(t, s)| !t.same_storage(s));

    // The teacher path reads the student's decoder storage: nudging a
    // decoder block weight moves the teacher's prediction. (Index 0 is the
    // mask token, which an unmasked pass never consults.)
    let before = forward_teacher(&teacher.encoder, &model, &s.left, &s.right).unwrap();
    let dec = model.decoder.params();
    let orig = dec[1].value()[0];
    dec[1].update_value(|v, _| v[0] = orig + 0.25);
    let after = forward_teacher(&teacher.encoder, &model, &s.left, &s.right).unwrap();
    dec[1].update_value(|v, _| v[0] = orig);
    let decoder_shared = before.d != after.d || before.sigma != after.sigma;

    // EMA rewrites teacher encoder weights only: the decoder and the student
    // encoder hold their exact bits.
    s_enc[0].update_value(|v, _| v[0] += 0.125);
    let dec_bits = bits(&dec.iter().map(|p| p.value()).collect::<Vec<_>>());
    let s_bits = bits(&s_enc.iter().map(|p| p.value()).collect::<Vec<_>>());
    let t_before: Vec<Vec<f64>> = t_params.iter().map(|p| p.value()).collect();
    ema_update(&mut teacher, &model.encoder).unwrap();
    let dec_untouched =
        bits(&dec.iter().map(|p| p.value()).collect::<Vec<_>>()) == dec_bits;
    let student_untouched =
        bits(&s_enc.iter().map(|p| p.value()).collect::<Vec<_>>()) == s_bits;
    let teacher_moved = teacher
        .encoder
        .params()
        .iter()
        .zip(&t_before)
        .zip(&s_enc)
        .all(|((t, t0), s)| {
            let (tv, sv) = (t.value(), s.value());
            tv.iter()
                .zip(t0)
                .zip(&sv)
                .all(|((&now, &was), &stu)| (now - (0.5 * was + 0.5 * stu)).abs() < 1e-15)
        });

    verdict(
        5,
        "siamese weight sharing",
        copy_shape_ok && unaliased && decoder_shared && dec_untouched && student_untouched && teacher_moved,
        &format!(
            "encoder copy {copy_shape_ok}, unaliased {unaliased}, decoder shared {decoder_shared}, ema scope exact {}",
            dec_untouched && student_untouched && teacher_moved
        ),
    );
}

// ── 6. Masking exactness ────────────────────────────────────────────────────

#[test]
fn criterion_06_masking_exactness() {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let mut checked = 0;
    let mut all_exact = true;
    for &n in &[1usize, 2, 5, 8, 16, 32, 33, 64, 100, 257] {
        for &beta in &[0.0, 0.1, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9, 1.0] {
            let mask = sample_mask(n, beta, &mut rng).unwrap();
            let expect = (beta * n as f64).round() as usize;
            let mut union: Vec<usize> = mask.masked_indices();
            union.extend(mask.visible_indices());
            union.sort_unstable();
            let exact = mask.num_masked() == expect
                && mask.masked_indices().len() == expect
                && union == (0..n).collect::<Vec<_>>()
                && mask.flags().iter().filter(|&&f| f).count() == expect;
            all_exact &= exact;
            checked += 1;
        }
    }
    let defaults_ok = ModelConfig::default().mask_ratio == 0.4
        && TrainConfig::default().mask_ratio == 0.4
        && DistillConfig::default().mask_ratio == 0.4;
    verdict(
        6,
        "masking exactness",
        all_exact && defaults_ok,
        &format!("{checked} (beta, N) pairs exact, shipped ratio 0.4 everywhere {defaults_ok}"),
    );
}

// ── 7. Loss and metric oracles ──────────────────────────────────────────────

#[test]
fn criterion_07_loss_and_metric_oracles() {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = 64;

        // Disparity loss against a per-pixel scalar loop.
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..3.0)).collect();
        let d_gt: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let d_pgt: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        valid[0] = true;
        for neg_sign in [false, true] {
            let tape = Tape::new();
            let pred = DisparityPrediction {
                d: tape.constant(&[8, 8], d.clone()).unwrap(),
                sigma: tape.constant(&[8, 8], sigma.clone()).unwrap(),
            };
            let sup = SupervisionBundle {
                d_gt: d_gt.clone(),
                gt_valid: valid.clone(),
                d_pgt: d_pgt.clone(),
            };
            let opts = LossConfig { negative_log_sigma_term: neg_sign, ..Default::default() };
            let got = disparity_loss(&tape, &pred, &sup, &opts).unwrap().item().unwrap();
            let sign = if neg_sign { -2.0 } else { 2.0 };
            let mut oracle = 0.0;
            for i in 0..n {
                let target = if valid[i] { d_gt[i] } else { d_pgt[i] };
                oracle += (d[i] - target).abs() / sigma[i] + sign * sigma[i].ln();
            }
            oracle /= n as f64;
            worst = worst.max((got - oracle).abs());
        }

        // Reconstruction loss on an 8x8 image with 4x4 patches.
        let cfg = ModelConfig {
            image_h: 8,
            image_w: 8,
            patch_size: 4,
            channels: 1,
            ..ModelConfig::default()
        };
        let img: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let tokens: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let flags: Vec<bool> = (0..4).map(|_| rng.gen_bool(0.5)).collect();
        let mask = PatchMask::from_flags(flags);
        for abs in [false, true] {
            let tape = Tape::new();
            let recon = tape.constant(&[4, 16], tokens.clone()).unwrap();
            let opts = LossConfig { recon_abs: abs, ..Default::default() };
            let got =
                recon_loss(&tape, &recon, &img, &mask, &cfg, &opts).unwrap().item().unwrap();
            let mut acc = 0.0;
            let mut count = 0usize;
            for y in 0..8 {
                for x in 0..8 {
                    let patch = (y / 4) * 2 + x / 4;
                    if mask.is_masked(patch) {
                        count += 1;
                        let token_i = patch * 16 + (y % 4) * 4 + (x % 4);
                        let e = tokens[token_i] - img[y * 8 + x];
                        acc += if abs { e.abs() } else { e * e };
                    }
                }
            }
            let oracle = if count == 0 { 0.0 } else { acc / count as f64 };
            worst = worst.max((got - oracle).abs());
        }

        // Metrics on strictly positive ground truth.
        let md: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..20.0)).collect();
        let mg: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..20.0)).collect();
        let mut mv: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        mv[0] = true;
        let count = mv.iter().filter(|&&v| v).count() as f64;
        let mut sum_abs = 0.0;
        let mut sum_sq = 0.0;
        let mut d1_hits = 0.0;
        for i in 0..n {
            if mv[i] {
                let e = (md[i] - mg[i]).abs();
                sum_abs += e;
                sum_sq += e * e;
                if e > 3.0 && e > 0.05 * mg[i] {
                    d1_hits += 1.0;
                }
            }
        }
        worst = worst.max((avgerr(&md, &mg, &mv).unwrap() - sum_abs / count).abs());
        worst = worst.max((rmse(&md, &mg, &mv).unwrap() - (sum_sq / count).sqrt()).abs());
        worst = worst.max((d1(&md, &mg, &mv).unwrap() - 100.0 * d1_hits / count).abs());
        for tau in [0.5, 1.0, 2.0, 3.0] {
            let hits = (0..n)
                .filter(|&i| mv[i] && (md[i] - mg[i]).abs() > tau)
                .count() as f64;
            worst = worst.max((bad_tau(&md, &mg, &mv, tau).unwrap() - 100.0 * hits / count).abs());
        }
    }
    verdict(
        7,
        "loss and metric oracles",
        worst < 1e-12,
        &format!("50 instances, worst deviation {worst:.2e}"),
    );
}

// ── 8. Overfit convergence ──────────────────────────────────────────────────

#[test]
fn criterion_08_overfit_convergence() {
    let started = Instant::now();
    let model_cfg = ModelConfig::default();
    let set: Vec<StereoSample> = (0..8u64)
        .map(|s| synth_generate(s, model_cfg.image_h, model_cfg.image_w, &SceneParams::default()).unwrap())
        .collect();

    // Fixed-mask reconstruction probe, measured before and after training.
    let probe_masks: Vec<(PatchMask, PatchMask)> =
        (0..set.len()).map(|i| fixed_masks(&model_cfg, 777 + i as u64, 0.4)).collect();
    let recon_probe = |model: &StereoModel| -> f64 {
        let opts = LossConfig::default();
        let mut acc = 0.0;
        for (s, masks) in set.iter().zip(&probe_masks) {
            let tape = Tape::new();
            let out =
                forward_student(&tape, model, &s.left, &s.right, &masks.0, &masks.1).unwrap();
            let l = recon_loss(&tape, out.recon_left.as_ref().unwrap(), &s.left, &masks.0, &model.cfg, &opts)
                .unwrap();
            let r = recon_loss(&tape, out.recon_right.as_ref().unwrap(), &s.right, &masks.1, &model.cfg, &opts)
                .unwrap();
            acc += l.item().unwrap() + r.item().unwrap();
        }
        acc / set.len() as f64
    };

    let train_cfg = TrainConfig { lr: 3e-4, epochs: 1000, ..TrainConfig::default() };
    let fresh = StereoModel::new(model_cfg.clone(), train_cfg.seed).unwrap();
    let recon_at_start = recon_probe(&fresh);

    let session = TrainSession {
        model_cfg,
        train_cfg,
        train_set: &set,
        eval_set: &[],
        out_dir: None,
        resume: None,
    };
    let out = train(&session).unwrap();
    let steps = out.reports.len();
    let summary = evaluate(&out.model, &out.model.encoder, &set).unwrap();
    let recon_at_end = recon_probe(&out.model);
    let ratio = recon_at_end / recon_at_start;
    let elapsed = started.elapsed().as_secs_f64();

    verdict(
        8,
        "overfit convergence",
        steps == 2000 && summary.avgerr < 0.5 && ratio < 0.25 && elapsed < 900.0,
        &format!(
            "{steps} steps, train avgerr {:.3} px, recon mse {:.4} -> {:.4} (ratio {:.3}), {elapsed:.0}s",
            summary.avgerr, recon_at_start, recon_at_end, ratio
        ),
    );
}

// ── 9. Attention distance ───────────────────────────────────────────────────

#[test]
fn criterion_09_attention_distance() {
    use stereomim_core::analysis::{attention_distance, collect_and_emit, AttentionRecord};

    let record = |weights: Vec<f64>, grid: (usize, usize), p: usize| AttentionRecord {
        layer: 0,
        head: 0,
        weights,
        query_grid: grid,
        key_grid: grid,
        patch_size: p,
    };

    // Identity attention stays put.
    let mut identity_ok = true;
    for (grid, p) in [((2usize, 2usize), 16usize), ((2, 4), 16), ((3, 3), 8)] {
        let t = grid.0 * grid.1;
        let mut w = vec![0.0; t * t];
        for q in 0..t {
            w[q * t + q] = 1.0;
        }
        identity_ok &= attention_distance(&record(w, grid, p)).unwrap() == 0.0;
    }

    // Uniform attention equals the exhaustive mean pairwise center distance.
    let mut max_dev: f64 = 0.0;
    for (grid, p) in [((2usize, 2usize), 16usize), ((2, 4), 16), ((3, 3), 8), ((4, 4), 4)] {
        let t = grid.0 * grid.1;
        let got = attention_distance(&record(vec![1.0 / t as f64; t * t], grid, p)).unwrap();
        let centers: Vec<(f64, f64)> = (0..t)
            .map(|i| {
                let (r, c) = (i / grid.1, i % grid.1);
                ((c as f64 + 0.5) * p as f64, (r as f64 + 0.5) * p as f64)
            })
            .collect();
        let mut oracle = 0.0;
        for &(qx, qy) in &centers {
            for &(kx, ky) in &centers {
                oracle += ((qx - kx).powi(2) + (qy - ky).powi(2)).sqrt();
            }
        }
        oracle /= (t * t) as f64;
        max_dev = max_dev.max((got - oracle).abs());
    }

    // Emitted CSV covers every decoder layer and head.
    let cfg = ModelConfig::toy();
    let model = StereoModel::new(cfg.clone(), 53).unwrap();
    let samples = toy_set(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("attn.csv");
    let rows = collect_and_emit(&model, &samples, &path).unwrap();
    let lines = std::fs::read_to_string(&path).unwrap().lines().count();
    let shape_ok =
        rows.len() == cfg.decoder_depth * cfg.num_heads && lines == rows.len() + 1;

    verdict(
        9,
        "attention distance",
        identity_ok && max_dev < 1e-9 && shape_ok,
        &format!(
            "identity exact {identity_ok}, uniform vs oracle {max_dev:.2e}, csv rows {} for depth {} x heads {}",
            rows.len(),
            cfg.decoder_depth,
            cfg.num_heads
        ),
    );
}

// ── 10. Ablation harness ────────────────────────────────────────────────────

#[test]
fn criterion_10_ablation_harness() {
    let cfg = ModelConfig::toy();
    let set = toy_set(2);
    let base = TrainConfig {
        lr: 1e-4,
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();

    let csv = dir.path().join("mask.csv");
    let sweep = ablate(AblationMode::MaskRatioSweep, &cfg, &base, &set, &set, Some(&csv)).unwrap();
    let sweep_arms: Vec<&str> = sweep.iter().map(|r| r.arm.as_str()).collect();
    let sweep_ok = sweep_arms == ["0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"];
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let csv_ok = lines.len() == 10
        && lines[0] == "arm,avgerr,rmse,bad@0.5,bad@1.0,bad@2.0,bad@3.0"
        && lines[1..].iter().all(|l| l.split(',').count() == 7);

    let toggle = ablate(AblationMode::EmaToggle, &cfg, &base, &set, &set, None).unwrap();
    let toggle_ok = toggle.len() == 2 && toggle[0].arm == "ema_off" && toggle[1].arm == "ema_on";

    let weights = ablate(AblationMode::LossWeightSweep, &cfg, &base, &set, &set, None).unwrap();
    let weight_arms: Vec<&str> = weights.iter().map(|r| r.arm.as_str()).collect();
    let weights_ok = weight_arms == ["0.1", "0.3", "0.5", "0.7", "1.0"];

    // Reported, not asserted: heavier masking is expected to hurt accuracy.
    let at = |arm: &str| sweep.iter().find(|r| r.arm == arm).unwrap().avgerr;
    let trend = if at("0.9") > at("0.4") { "holds" } else { "reversed at this scale" };
    println!(
        "criterion 10 note: avgerr at mask ratio 0.4 = {:.3}, at 0.9 = {:.3}; expected trend {trend}",
        at("0.4"),
        at("0.9")
    );

    verdict(
        10,
        "ablation harness",
        sweep_ok && csv_ok && toggle_ok && weights_ok,
        &format!(
            "mask sweep 9 arms {sweep_ok}, csv shape {csv_ok}, ema arms {toggle_ok}, weight arms {weights_ok}"
        ),
    );
}

// ── 11. Determinism and checkpoint round trip ───────────────────────────────

#[test]
fn criterion_11_determinism_and_resume() {
    let cfg = ModelConfig::toy();
    let set = toy_set(3);
    let train_cfg = TrainConfig {
        lr: 1e-4,
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 2,
        seed: 21,
        checkpoint_every: 2,
        ..TrainConfig::default()
    };

    let report_bits = |reports: &[stereomim_core::distill::StepReport]| -> Vec<[u64; 6]> {
        reports
            .iter()
            .map(|r| {
                [
                    r.l_total.to_bits(),
                    r.l_disp.to_bits(),
                    r.l_img_l.to_bits(),
                    r.l_img_r.to_bits(),
                    r.grad_norm.to_bits(),
                    r.lr.to_bits(),
                ]
            })
            .collect()
    };
    let param_bits = |model: &StereoModel| -> Vec<Vec<u64>> {
        bits(&model.all_params().iter().map(|p| p.value()).collect::<Vec<_>>())
    };

    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let session = |out_dir: Option<std::path::PathBuf>, resume: Option<std::path::PathBuf>| {
        TrainSession {
            model_cfg: cfg.clone(),
            train_cfg: train_cfg.clone(),
            train_set: &set,
            eval_set: &[],
            out_dir,
            resume,
        }
    };

    let a = train(&session(Some(full_dir.clone()), None)).unwrap();
    let b = train(&session(None, None)).unwrap();
    let deterministic =
        report_bits(&a.reports) == report_bits(&b.reports) && param_bits(&a.model) == param_bits(&b.model);

    let resumed = train(&session(None, Some(full_dir.join("ckpt_000002.json")))).unwrap();
    let tail_match = report_bits(&resumed.reports) == report_bits(&a.reports[2..]);
    let final_match = param_bits(&resumed.model) == param_bits(&a.model);
    let teacher_match = match (&a.teacher, &resumed.teacher) {
        (Some(x), Some(y)) => {
            bits(&x.encoder.params().iter().map(|p| p.value()).collect::<Vec<_>>())
                == bits(&y.encoder.params().iter().map(|p| p.value()).collect::<Vec<_>>())
        }
        _ => false,
    };

    verdict(
        11,
        "determinism and resume",
        deterministic && tail_match && final_match && teacher_match,
        &format!(
            "replay bitwise {deterministic}, resumed tail {tail_match}, final params {final_match}, teacher {teacher_match}"
        ),
    );
}
