//! Disparity evaluation metrics: average error, RMSE, bad-pixel rates, and
//! the D1 outlier rate.

use crate::error::{Error, Result};

fn check_lengths(op: &'static str, d: &[f64], d_gt: &[f64], valid: &[bool]) -> Result<()> {
    if d.len() != d_gt.len() || d.len() != valid.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![d.len()],
            rhs: vec![d_gt.len(), valid.len()],
        });
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::domain(op, "empty valid set"));
    }
    Ok(())
}

/// Mean absolute disparity error in pixels over the valid set.
pub fn avgerr(d: &[f64], d_gt: &[f64], valid: &[bool]) -> Result<f64> {
    check_lengths("avgerr", d, d_gt, valid)?;
    let (mut acc, mut n) = (0.0, 0usize);
    for i in 0..d.len() {
        if valid[i] {
            acc += (d[i] - d_gt[i]).abs();
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// Root mean squared disparity error in pixels over the valid set.
pub fn rmse(d: &[f64], d_gt: &[f64], valid: &[bool]) -> Result<f64> {
    check_lengths("rmse", d, d_gt, valid)?;
    let (mut acc, mut n) = (0.0, 0usize);
    for i in 0..d.len() {
        if valid[i] {
            let e = d[i] - d_gt[i];
            acc += e * e;
            n += 1;
        }
    }
    Ok((acc / n as f64).sqrt())
}

/// Percentage of valid pixels whose absolute error exceeds `tau`.
pub fn bad_tau(d: &[f64], d_gt: &[f64], valid: &[bool], tau: f64) -> Result<f64> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::domain("bad_tau", "tau must be positive"));
    }
    check_lengths("bad_tau", d, d_gt, valid)?;
    let (mut bad, mut n) = (0usize, 0usize);
    for i in 0..d.len() {
        if valid[i] {
            if (d[i] - d_gt[i]).abs() > tau {
                bad += 1;
            }
            n += 1;
        }
    }
    Ok(100.0 * bad as f64 / n as f64)
}

/// KITTI D1 outlier rate: percentage of valid pixels whose error exceeds
/// both 3 px and 5% of the true disparity. Requires positive ground truth
/// on the valid set.
pub fn d1(d: &[f64], d_gt: &[f64], valid: &[bool]) -> Result<f64> {
    check_lengths("d1", d, d_gt, valid)?;
    let (mut bad, mut n) = (0usize, 0usize);
    for i in 0..d.len() {
        if valid[i] {
            if d_gt[i] <= 0.0 {
                return Err(Error::domain("d1", "ground truth must be positive on valid pixels"));
            }
            let e = (d[i] - d_gt[i]).abs();
            if e > 3.0 && e > 0.05 * d_gt[i] {
                bad += 1;
            }
            n += 1;
        }
    }
    Ok(100.0 * bad as f64 / n as f64)
}

/// D1 restricted to the pixels where `region` holds (foreground or
/// background split). The effective valid set is `valid ∧ region`.
pub fn d1_region(d: &[f64], d_gt: &[f64], valid: &[bool], region: &[bool]) -> Result<f64> {
    if region.len() != valid.len() {
        return Err(Error::ShapeMismatch {
            op: "d1_region",
            lhs: vec![valid.len()],
            rhs: vec![region.len()],
        });
    }
    let combined: Vec<bool> = valid.iter().zip(region).map(|(&v, &r)| v && r).collect();
    d1(d, d_gt, &combined)
}
