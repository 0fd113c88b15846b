use super::{EstimatorParams, Real};
use crate::error::{check_shape, RedError, Result};

/// AdamW optimizer state with decoupled weight decay and a step-halving
/// learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    /// The learning rate halves every `decay_interval` steps; 0 disables.
    pub decay_interval: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64, decay_interval: u64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            weight_decay,
            decay_interval,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Learning rate used by the next step.
    pub fn current_lr(&self) -> f64 {
        if self.decay_interval == 0 {
            return self.lr;
        }
        let halvings = (self.step / self.decay_interval).min(1000) as i32;
        self.lr * 0.5f64.powi(halvings)
    }
}

/// One AdamW update, in place.
///
/// `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)` with bias
/// corrected moments. Non-finite gradients reject the step and leave both
/// parameters and state untouched.
pub fn adamw_step<T: Real>(
    params: &mut EstimatorParams<T>,
    grads: &[T],
    opt: &mut OptState,
) -> Result<()> {
    check_shape((params.len(), 1), (grads.len(), 1))?;
    check_shape((params.len(), 1), (opt.m.len(), 1))?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(RedError::NonFinite(format!(
            "gradient {i} at optimizer step {}",
            opt.step
        )));
    }
    let lr = opt.current_lr();
    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    let decay = 1.0 - lr * opt.weight_decay;
    for (((p, &g), m), v) in params
        .values
        .iter_mut()
        .zip(grads)
        .zip(opt.m.iter_mut())
        .zip(opt.v.iter_mut())
    {
        let g = g.f64();
        *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
        *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
        let update = (*m / bc1) / ((*v / bc2).sqrt() + opt.eps);
        *p = T::of(p.f64() * decay - lr * update);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{Activation, NetArch};

    fn tiny() -> EstimatorParams<f64> {
        let arch = NetArch {
            widths: vec![1, 1],
            kernel: 1,
            time_dim: 2,
            activation: Activation::Identity,
        };
        let mut p = EstimatorParams::zeros(arch).unwrap();
        p.values = vec![0.5, -1.0, 2.0, 0.25, 3.0];
        p
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = tiny();
        let before = p.clone();
        let mut opt = OptState::new(p.len(), 1e-3, 0.0, 0);
        for _ in 0..5 {
            adamw_step(&mut p, &[0.0; 5], &mut opt).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn zero_grad_decays_geometrically() {
        let mut p = tiny();
        let before = p.clone();
        let (lr, wd) = (1e-2, 0.1);
        let mut opt = OptState::new(p.len(), lr, wd, 0);
        for _ in 0..3 {
            adamw_step(&mut p, &[0.0; 5], &mut opt).unwrap();
        }
        for (a, b) in p.values.iter().zip(&before.values) {
            assert!((a - b * (1.0 - lr * wd).powi(3)).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_matches_hand_calculation() {
        // p = 0.5, g = 0.2, lr = 0.1, wd = 0.01, default betas, eps = 1e-8:
        // m = 0.02, v = 4e-5, m_hat = 0.2, v_hat = 0.04, update = 0.2 / (0.2 + 1e-8)
        // p' = 0.5 * (1 - 0.001) - 0.1 * 0.99999995 = 0.39950000500000025
        let mut p = tiny();
        let mut opt = OptState::new(p.len(), 0.1, 0.01, 0);
        adamw_step(&mut p, &[0.2, 0.0, 0.0, 0.0, 0.0], &mut opt).unwrap();
        assert!((p.values[0] - 0.399_500_005).abs() < 1e-12, "{}", p.values[0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn learning_rate_halves_on_interval() {
        let mut opt = OptState::new(1, 1e-4, 0.0, 10);
        assert_eq!(opt.current_lr(), 1e-4);
        opt.step = 10;
        assert_eq!(opt.current_lr(), 5e-5);
        opt.step = 25;
        assert_eq!(opt.current_lr(), 2.5e-5);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = tiny();
        let before = p.clone();
        let mut opt = OptState::new(p.len(), 1e-3, 0.0, 0);
        assert!(adamw_step(&mut p, &[0.0, f64::NAN, 0.0, 0.0, 0.0], &mut opt).is_err());
        assert_eq!(p, before);
        assert_eq!(opt.step, 0);
    }
}
