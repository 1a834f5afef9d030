//! Attention-locality measurement: mean spatial distance of attention per
//! head per decoder layer, emitted as CSV for plotting.

use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::model::{forward_pair, ForwardMode, LayerAttention, PatchMask, StereoModel};
use crate::tensor::Tape;
use std::path::Path;

/// One head's attention matrix along with the grid geometry needed to place
/// tokens in pixel space. Rows must be distributions over keys.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    /// `[query_tokens, key_tokens]` row-major.
    pub weights: Vec<f64>,
    /// Query token grid as (rows, cols).
    pub query_grid: (usize, usize),
    /// Key token grid as (rows, cols).
    pub key_grid: (usize, usize),
    pub patch_size: usize,
}

fn token_centers(grid: (usize, usize), patch_size: usize) -> Vec<(f64, f64)> {
    let p = patch_size as f64;
    let mut centers = Vec::with_capacity(grid.0 * grid.1);
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            centers.push(((c as f64 + 0.5) * p, (r as f64 + 0.5) * p));
        }
    }
    centers
}

/// Mean attention-weighted distance between query and key token centers, in
/// pixels, averaged over queries.
pub fn attention_distance(rec: &AttentionRecord) -> Result<f64> {
    let tq = rec.query_grid.0 * rec.query_grid.1;
    let tk = rec.key_grid.0 * rec.key_grid.1;
    if rec.patch_size == 0 || tq == 0 || tk == 0 {
        return Err(Error::domain("attention_distance", "degenerate grid geometry"));
    }
    if rec.weights.len() != tq * tk {
        return Err(Error::ShapeMismatch {
            op: "attention_distance",
            lhs: vec![rec.weights.len()],
            rhs: vec![tq, tk],
        });
    }
    let qc = token_centers(rec.query_grid, rec.patch_size);
    let kc = token_centers(rec.key_grid, rec.patch_size);
    let mut total = 0.0;
    for (q, &(qx, qy)) in qc.iter().enumerate() {
        let row = &rec.weights[q * tk..(q + 1) * tk];
        let mut sum = 0.0;
        let mut dist = 0.0;
        for (&w, &(kx, ky)) in row.iter().zip(&kc) {
            if w < 0.0 {
                return Err(Error::domain("attention_distance", "negative attention weight"));
            }
            sum += w;
            let (dx, dy) = (qx - kx, qy - ky);
            dist += w * (dx * dx + dy * dy).sqrt();
        }
        if (sum - 1.0).abs() > 1e-8 {
            return Err(Error::domain("attention_distance", "attention row does not sum to 1"));
        }
        total += dist;
    }
    Ok(total / tq as f64)
}

/// Split per-layer attention records into per-head cross-attention distance
/// records over the model's token grid.
pub fn cross_attention_records(
    attn: &[LayerAttention],
    grid: (usize, usize),
    patch_size: usize,
) -> Result<Vec<AttentionRecord>> {
    let tokens = grid.0 * grid.1;
    let mut out = Vec::new();
    for (layer, la) in attn.iter().enumerate() {
        if la.tokens != tokens || la.cross_weights.len() != la.heads * tokens * tokens {
            return Err(Error::ShapeMismatch {
                op: "cross_attention_records",
                lhs: vec![la.heads, la.tokens],
                rhs: vec![grid.0, grid.1],
            });
        }
        for head in 0..la.heads {
            let start = head * tokens * tokens;
            out.push(AttentionRecord {
                layer,
                head,
                weights: la.cross_weights[start..start + tokens * tokens].to_vec(),
                query_grid: grid,
                key_grid: grid,
                patch_size,
            });
        }
    }
    Ok(out)
}

/// Mean cross-attention distance per decoder layer and head, averaged over
/// unmasked forward passes on every sample. Rows are ordered layer-major.
pub fn collect_distances(
    model: &StereoModel,
    samples: &[StereoSample],
) -> Result<Vec<(usize, usize, f64)>> {
    if samples.is_empty() {
        return Err(Error::domain("collect_distances", "empty dataset"));
    }
    let cfg = &model.cfg;
    let grid = (cfg.grid_h(), cfg.grid_w());
    let empty = PatchMask::empty(cfg.num_patches());
    let mut sums: Vec<(usize, usize, f64)> = Vec::new();
    for sample in samples {
        let tape = Tape::new();
        let out = forward_pair(
            &tape,
            &model.encoder,
            &model.decoder,
            cfg,
            &sample.left,
            &sample.right,
            &empty,
            &empty,
            ForwardMode::Full,
        )?;
        let records = cross_attention_records(&out.attention, grid, cfg.patch_size)?;
        if sums.is_empty() {
            sums = records.iter().map(|r| (r.layer, r.head, 0.0)).collect();
        }
        for (slot, rec) in sums.iter_mut().zip(&records) {
            debug_assert_eq!((slot.0, slot.1), (rec.layer, rec.head));
            slot.2 += attention_distance(rec)?;
        }
    }
    let n = samples.len() as f64;
    for slot in &mut sums {
        slot.2 /= n;
    }
    Ok(sums)
}

/// Run [`collect_distances`] and write the result as CSV with header
/// `layer,head,mean_distance_px`, one row per decoder layer and head.
pub fn collect_and_emit(
    model: &StereoModel,
    samples: &[StereoSample],
    path: impl AsRef<Path>,
) -> Result<Vec<(usize, usize, f64)>> {
    let rows = collect_distances(model, samples)?;
    let mut csv = String::from("layer,head,mean_distance_px\n");
    for (layer, head, dist) in &rows {
        csv.push_str(&format!("{layer},{head},{dist}\n"));
    }
    let path = path.as_ref();
    std::fs::write(path, csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SceneParams};
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn record(weights: Vec<f64>, grid: (usize, usize), p: usize) -> AttentionRecord {
        AttentionRecord {
            layer: 0,
            head: 0,
            weights,
            query_grid: grid,
            key_grid: grid,
            patch_size: p,
        }
    }

    fn random_stochastic(rng: &mut ChaCha20Rng, tq: usize, tk: usize) -> Vec<f64> {
        let mut w = vec![0.0; tq * tk];
        for q in 0..tq {
            let row = &mut w[q * tk..(q + 1) * tk];
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen_range(0.01..1.0);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        w
    }

    #[test]
    fn self_attention_to_own_token_has_zero_distance() {
        let mut w = vec![0.0; 16];
        for q in 0..4 {
            w[q * 4 + q] = 1.0;
        }
        assert_eq!(attention_distance(&record(w, (2, 2), 16)).unwrap(), 0.0);
    }

    #[test]
    fn uniform_attention_matches_the_pairwise_oracle() {
        let w = vec![0.25; 16];
        let got = attention_distance(&record(w, (2, 2), 16)).unwrap();
        // Exhaustive mean pairwise center distance on the 2x2 grid.
        let centers = [(8.0, 8.0), (24.0, 8.0), (8.0, 24.0), (24.0, 24.0)];
        let mut oracle = 0.0;
        for q in centers {
            for k in centers {
                let (dx, dy): (f64, f64) = (q.0 - k.0, q.1 - k.1);
                oracle += (dx * dx + dy * dy).sqrt() / 16.0;
            }
        }
        assert!((got - oracle).abs() < 1e-12);
        assert!((oracle - (8.0 + 4.0 * 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn one_hot_attention_to_the_horizontal_neighbor() {
        // 1x2 grid; each token fully attends the other.
        let w = vec![0.0, 1.0, 1.0, 0.0];
        assert_eq!(attention_distance(&record(w, (1, 2), 16)).unwrap(), 16.0);
    }

    #[test]
    fn grid_transposition_preserves_distances() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let (gh, gw) = (3, 4);
        let t = gh * gw;
        let w = random_stochastic(&mut rng, t, t);
        let base = attention_distance(&record(w.clone(), (gh, gw), 8)).unwrap();
        // Relabel token (r, c) as (c, r) on the transposed grid; distances
        // between centers are unchanged.
        let remap = |i: usize| {
            let (r, c) = (i / gw, i % gw);
            c * gh + r
        };
        let mut wt = vec![0.0; t * t];
        for q in 0..t {
            for k in 0..t {
                wt[remap(q) * t + remap(k)] = w[q * t + k];
            }
        }
        let transposed = attention_distance(&record(wt, (gw, gh), 8)).unwrap();
        assert!((base - transposed).abs() < 1e-12);
    }

    #[test]
    fn distances_stay_inside_the_grid_diagonal() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..20 {
            let gh = rng.gen_range(1..5);
            let gw = rng.gen_range(1..5);
            let p = [4, 8, 16][rng.gen_range(0..3)];
            let t = gh * gw;
            let w = random_stochastic(&mut rng, t, t);
            let d = attention_distance(&record(w, (gh, gw), p)).unwrap();
            let diagonal = p as f64 * ((gh * gh + gw * gw) as f64).sqrt();
            assert!((0.0..=diagonal).contains(&d));
        }
    }

    #[test]
    fn malformed_records_are_rejected() {
        let ok = vec![0.25; 16];
        assert!(attention_distance(&record(ok.clone(), (2, 3), 16)).is_err());
        assert!(attention_distance(&record(ok.clone(), (2, 2), 0)).is_err());
        let unnormalized = vec![0.3; 16];
        assert!(attention_distance(&record(unnormalized, (2, 2), 16)).is_err());
        let mut negative = vec![0.25; 16];
        negative[0] = -0.25;
        negative[1] = 0.75;
        assert!(attention_distance(&record(negative, (2, 2), 16)).is_err());
    }

    fn toy_setup() -> (StereoModel, Vec<StereoSample>) {
        let cfg = ModelConfig::toy();
        let model = StereoModel::new(cfg.clone(), 33).unwrap();
        let params = SceneParams { max_disparity: 8, ..SceneParams::default() };
        let samples = vec![
            synth_generate(1, cfg.image_h, cfg.image_w, &params).unwrap(),
            synth_generate(2, cfg.image_h, cfg.image_w, &params).unwrap(),
        ];
        (model, samples)
    }

    #[test]
    fn csv_has_one_row_per_layer_and_head() {
        let (model, samples) = toy_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.csv");
        let rows = collect_and_emit(&model, &samples, &path).unwrap();
        let cfg = &model.cfg;
        assert_eq!(rows.len(), cfg.decoder_depth * cfg.num_heads);

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("layer,head,mean_distance_px"));
        let parsed: Vec<(usize, usize, f64)> = lines
            .map(|l| {
                let mut it = l.split(',');
                (
                    it.next().unwrap().parse().unwrap(),
                    it.next().unwrap().parse().unwrap(),
                    it.next().unwrap().parse().unwrap(),
                )
            })
            .collect();
        assert_eq!(parsed.len(), rows.len());
        for ((pl, ph, pd), (rl, rh, rd)) in parsed.iter().zip(&rows) {
            assert_eq!((pl, ph), (rl, rh));
            assert!((pd - rd).abs() < 1e-9);
        }
        // Expected ordering: layer-major, heads within.
        for (i, (l, h, _)) in rows.iter().enumerate() {
            assert_eq!((*l, *h), (i / cfg.num_heads, i % cfg.num_heads));
        }
    }

    #[test]
    fn aggregation_over_identical_samples_is_a_fixed_point() {
        let (model, samples) = toy_setup();
        let one = collect_distances(&model, &samples[..1]).unwrap();
        let twice = collect_distances(&model, &[samples[0].clone(), samples[0].clone()]).unwrap();
        assert_eq!(one, twice);
    }

    #[test]
    fn csv_values_match_direct_recomputation() {
        let (model, samples) = toy_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.csv");
        let emitted = collect_and_emit(&model, &samples, &path).unwrap();
        let recomputed = collect_distances(&model, &samples).unwrap();
        for (a, b) in emitted.iter().zip(&recomputed) {
            assert_eq!((a.0, a.1), (b.0, b.1));
            assert!((a.2 - b.2).abs() < 1e-9);
        }
        assert!(collect_distances(&model, &[]).is_err());
    }
}
