//! AdamW with decoupled weight decay, operating on shared parameter
//! storage.

use crate::error::{Error, Result};
use crate::tensor::Param;

/// AdamW optimizer state: first and second moment buffers per parameter,
/// plus the shared step counter driving bias correction.
#[derive(Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Param], weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter's accumulated gradient:
    /// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`. Gradients are validated for
    /// finiteness before anything mutates.
    pub fn step(&mut self, params: &[Param], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: vec![params.len()],
                rhs: vec![self.m.len()],
            });
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: vec![p.numel()],
                    rhs: vec![self.m[i].len()],
                });
            }
            if p.grad().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", p.name())));
            }
        }
        if !lr.is_finite() {
            return Err(Error::NonFinite("learning rate".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let (beta1, beta2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            p.update_value(|theta, grad| {
                for j in 0..theta.len() {
                    let g = grad[j];
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    theta[j] -= lr * m_hat / (v_hat.sqrt() + eps) + lr * wd * theta[j];
                }
            });
        }
        Ok(())
    }

    /// Flatten the moment buffers for checkpointing.
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.t, &self.m, &self.v)
    }

    /// Restore moment buffers saved by [`AdamW::state`].
    pub fn restore(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != self.m.len()
            || v.len() != self.v.len()
            || m.iter().zip(&self.m).any(|(a, b)| a.len() != b.len())
            || v.iter().zip(&self.v).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::ShapeMismatch {
                op: "adamw_restore",
                lhs: vec![m.len(), v.len()],
                rhs: vec![self.m.len()],
            });
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Global L2 norm over every parameter's accumulated gradient.
pub fn global_grad_norm(params: &[Param]) -> f64 {
    params
        .iter()
        .map(|p| p.grad().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::slice::from_ref;

    fn scalar_param(value: f64) -> Param {
        Param::new("p", &[1], vec![value]).unwrap()
    }

    fn set_grad(p: &Param, g: f64) {
        p.zero_grad();
        p.accumulate_grad(&[g]);
    }

    #[test]
    fn zero_gradients_without_decay_leave_parameters_unchanged() {
        let p = scalar_param(1.25);
        let mut opt = AdamW::new(from_ref(&p), 0.0);
        set_grad(&p, 0.0);
        opt.step(from_ref(&p), 0.1).unwrap();
        assert_eq!(p.value(), vec![1.25]);
    }

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        let p = scalar_param(1.0);
        let mut opt = AdamW::new(from_ref(&p), 0.0);
        set_grad(&p, 1.0);
        opt.step(from_ref(&p), 0.1).unwrap();
        // Bias correction makes the first step exactly lr·g/(|g| + ε·√bc2⁻¹)·…
        // ≈ lr for unit gradient.
        assert!((p.value()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn constant_gradient_steps_are_linear_in_step_count() {
        let p = scalar_param(1.0);
        let mut opt = AdamW::new(from_ref(&p), 0.0);
        for k in 1..=5u32 {
            set_grad(&p, 1.0);
            opt.step(from_ref(&p), 0.1).unwrap();
            // With constant unit gradients, m̂ = v̂ = 1 every step, so each
            // update subtracts exactly lr/(1 + ε).
            let expect = 1.0 - k as f64 * (0.1 / (1.0 + 1e-8));
            assert!((p.value()[0] - expect).abs() < 1e-12, "step {k}");
        }
    }

    #[test]
    fn weight_decay_is_decoupled_from_gradients() {
        let p = scalar_param(1.0);
        let mut opt = AdamW::new(from_ref(&p), 0.05);
        set_grad(&p, 0.0);
        opt.step(from_ref(&p), 0.1).unwrap();
        assert_eq!(p.value(), vec![1.0 - 0.005]);
    }

    #[test]
    fn non_finite_gradients_are_rejected_before_mutation() {
        let p = scalar_param(2.0);
        let mut opt = AdamW::new(from_ref(&p), 0.0);
        set_grad(&p, f64::NAN);
        assert!(opt.step(from_ref(&p), 0.1).is_err());
        assert_eq!(p.value(), vec![2.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn mismatched_parameter_sets_are_rejected() {
        let p = scalar_param(1.0);
        let q = scalar_param(2.0);
        let mut opt = AdamW::new(from_ref(&p), 0.0);
        assert!(opt.step(&[p.clone(), q.clone()], 0.1).is_err());
        let wide = Param::zeros("w", &[3]);
        assert!(opt.step(&[wide], 0.1).is_err());
    }

    #[test]
    fn restore_round_trips_optimizer_state() {
        let p = scalar_param(1.0);
        let mut opt = AdamW::new(from_ref(&p), 0.0);
        set_grad(&p, 0.5);
        opt.step(from_ref(&p), 0.1).unwrap();
        let (t, m, v) = opt.state();
        let (m, v) = (m.to_vec(), v.to_vec());

        let mut fresh = AdamW::new(from_ref(&p), 0.0);
        fresh.restore(t, m.clone(), v.clone()).unwrap();
        let (t2, m2, v2) = fresh.state();
        assert_eq!(t, t2);
        assert_eq!(m, m2);
        assert_eq!(v, v2);
        assert!(fresh.restore(t, vec![], vec![]).is_err());
    }

    #[test]
    fn grad_norm_is_the_global_l2_norm() {
        let p = Param::zeros("a", &[2]);
        let q = scalar_param(0.0);
        p.accumulate_grad(&[3.0, 0.0]);
        q.zero_grad();
        q.accumulate_grad(&[4.0]);
        assert_eq!(global_grad_norm(&[p, q]), 5.0);
    }
}
