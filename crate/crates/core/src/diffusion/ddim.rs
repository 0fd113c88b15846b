//! Deterministic (eta = 0) DDIM sampling for the Gaussian-noise baseline.
//!
//! ```text
//! forward:  x_t   = sqrt(ab_t) x_0 + sqrt(1 - ab_t) n
//! estimate: x0_hat = (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)
//! step:     x_s   = sqrt(ab_s) x0_hat + sqrt(1 - ab_s) eps_hat
//! ```

use super::Predictor;
use crate::error::{check_shape, RedError, Result};
use crate::tomo::Sinogram;

fn check_alpha_bar(ab: f64) -> Result<()> {
    if !(ab > 0.0 && ab <= 1.0) {
        return Err(RedError::InvalidArgument(format!(
            "alpha_bar must lie in (0, 1], got {ab}"
        )));
    }
    Ok(())
}

pub fn ddim_forward(x0: &[f32], alpha_bar: f64, noise: &[f32]) -> Result<Vec<f32>> {
    check_alpha_bar(alpha_bar)?;
    check_shape((x0.len(), 1), (noise.len(), 1))?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0
        .iter()
        .zip(noise)
        .map(|(&x, &n)| (a * x as f64 + b * n as f64) as f32)
        .collect())
}

/// The clean-sample estimate implied by `eps_hat`.
pub fn ddim_predict_x0(x_t: &[f32], eps_hat: &[f32], alpha_bar_t: f64) -> Result<Vec<f32>> {
    check_alpha_bar(alpha_bar_t)?;
    check_shape((x_t.len(), 1), (eps_hat.len(), 1))?;
    let (a, b) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| ((x as f64 - b * e as f64) / a) as f32)
        .collect())
}

pub fn ddim_step(
    x_t: &[f32],
    eps_hat: &[f32],
    alpha_bar_t: f64,
    alpha_bar_s: f64,
) -> Result<Vec<f32>> {
    check_alpha_bar(alpha_bar_t)?;
    check_alpha_bar(alpha_bar_s)?;
    check_shape((x_t.len(), 1), (eps_hat.len(), 1))?;
    if alpha_bar_s == alpha_bar_t {
        return Ok(x_t.to_vec());
    }
    let (at, bt) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let (as_, bs) = (alpha_bar_s.sqrt(), (1.0 - alpha_bar_s).sqrt());
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| {
            let x0 = (x as f64 - bt * e as f64) / at;
            (as_ * x0 + bs * e as f64) as f32
        })
        .collect())
}

/// Cumulative products `alpha_bar_t = prod_{i<=t} (1 - beta_i)` of a linear
/// noise schedule, with `alpha_bar_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(RedError::InvalidArgument("t_max must be >= 1".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(RedError::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 1..=t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                (i - 1) as f64 / (t_max - 1) as f64
            };
            acc *= 1.0 - (beta_start + frac * (beta_end - beta_start));
            alpha_bar.push(acc);
        }
        Ok(Self { t_max, alpha_bar })
    }

    /// Linearly interpolated at fractional `t`, clamped to `[0, t_max]`.
    pub fn alpha_bar(&self, t: f64) -> f64 {
        if !(t > 0.0) {
            return self.alpha_bar[0];
        }
        if t >= self.t_max as f64 {
            return self.alpha_bar[self.t_max];
        }
        let i = t.floor() as usize;
        let f = t - i as f64;
        self.alpha_bar[i] + f * (self.alpha_bar[i + 1] - self.alpha_bar[i])
    }
}

/// Noise the input to `times[0]` with `noise`, then walk the deterministic
/// sampler down `times` (descending, ending at 0).
pub fn ddim_reconstruct(
    x_start: &Sinogram,
    noise: &[f32],
    eps_model: &dyn Predictor,
    sched: &NoiseSchedule,
    times: &[f64],
) -> Result<Sinogram> {
    if times.len() < 2 || times.windows(2).any(|w| !(w[1] < w[0])) || times.last() != Some(&0.0) {
        return Err(RedError::InvalidArgument(
            "ddim times must strictly decrease to 0".into(),
        ));
    }
    let mut x = ddim_forward(&x_start.values, sched.alpha_bar(times[0]), noise)?;
    for w in times.windows(2) {
        let (t, s) = (w[0], w[1]);
        let cur = Sinogram {
            values: x,
            ..Sinogram::zeros(x_start.n_angles, x_start.n_bins)
        };
        let eps_hat = eps_model.predict(&cur, t)?;
        check_shape(cur.shape(), eps_hat.shape())?;
        x = ddim_step(&cur.values, &eps_hat.values, sched.alpha_bar(t), sched.alpha_bar(s))?;
    }
    Ok(Sinogram {
        values: x,
        ..Sinogram::zeros(x_start.n_angles, x_start.n_bins)
    })
}
