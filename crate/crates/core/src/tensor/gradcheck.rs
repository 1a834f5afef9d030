//! Gradient verification by central finite differences.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Compare the tape gradient of `f` at `x_data` against central finite
/// differences, coordinate by coordinate.
///
/// `f` must build a scalar loss from the given input tensor using only the
/// tensors recorded on the given tape. It is evaluated twice at the same
/// point first; a bitwise difference between the two losses means `f` is
/// not deterministic and the check refuses to proceed.
///
/// Returns the largest relative error
/// `|analytic − central| / max(|analytic|, |central|, 1e-8)` over all
/// coordinates.
pub fn finite_diff_check<F>(f: F, x_shape: &[usize], x_data: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::domain("finite_diff_check", format!("eps must be positive, got {eps}")));
    }
    let eval = |data: Vec<f64>, requires_grad: bool| -> Result<(Tape, Tensor, Tensor, f64)> {
        let tape = Tape::new();
        let x = tape.leaf(x_shape, data, requires_grad)?;
        let loss = f(&tape, &x)?;
        if loss.numel() != 1 {
            return Err(Error::domain(
                "finite_diff_check",
                format!("f must return a scalar, got shape {:?}", loss.shape()),
            ));
        }
        let v = loss.item()?;
        Ok((tape, x, loss, v))
    };

    let (tape, x, loss, l0) = eval(x_data.to_vec(), true)?;
    let (_, _, _, l1) = eval(x_data.to_vec(), true)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::domain(
            "finite_diff_check",
            format!("f is not deterministic: {l0:?} vs {l1:?} at the same point"),
        ));
    }
    if !l0.is_finite() {
        return Err(Error::NonFinite("finite_diff_check loss".into()));
    }

    tape.backward(&loss)?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x_data.len()]);

    let mut max_rel: f64 = 0.0;
    for i in 0..x_data.len() {
        let mut plus = x_data.to_vec();
        plus[i] += eps;
        let mut minus = x_data.to_vec();
        minus[i] -= eps;
        let (_, _, _, lp) = eval(plus, false)?;
        let (_, _, _, lm) = eval(minus, false)?;
        let central = (lp - lm) / (2.0 * eps);
        let denom = analytic[i].abs().max(central.abs()).max(1e-8);
        let rel = (analytic[i] - central).abs() / denom;
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
