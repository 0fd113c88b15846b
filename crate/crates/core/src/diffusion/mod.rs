//! Residual estimation diffusion.
//!
//! The forward process moves a full-dose sinogram `x_F` toward its low-dose
//! counterpart `x_L` by adding a growing share of the residual
//! `eps = x_L - x_F`:
//!
//! ```text
//! x_t = x_F + alpha(t) * eps
//! ```
//!
//! Reversing it only needs the residual: `x_s = x_t - (alpha(t) - alpha(s)) * eps`.
//! With a learned residual the trajectory drifts away from the true one; a
//! second estimator predicts the accumulated drift `gamma_t = x_t - x_hat_t`
//! and the sampler adds `beta(s) * gamma_hat` back after each step.

pub mod ddim;

use rand::Rng;

use crate::dose::bin_rng;
use crate::error::{check_shape, RedError, Result};
use crate::schedule::{ResidualSchedule, TimeGrid};
use crate::tomo::Sinogram;

/// Signed projection-domain array: a residual `x_L - x_F`, a prediction of
/// one, or a drift.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    pub n_angles: usize,
    pub n_bins: usize,
    pub values: Vec<f32>,
}

impl ResidualField {
    pub fn zeros(n_angles: usize, n_bins: usize) -> Self {
        Self {
            n_angles,
            n_bins,
            values: vec![0.0; n_angles * n_bins],
        }
    }

    pub fn from_vec(n_angles: usize, n_bins: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_angles * n_bins {
            return Err(RedError::ShapeMismatch {
                expected: (n_angles, n_bins),
                actual: (values.len(), 1),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(RedError::NonFinite(format!("residual value at index {i}")));
        }
        Ok(Self {
            n_angles,
            n_bins,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_angles, self.n_bins)
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// An intermediate sample `x_t` at (possibly fractional) time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x: Sinogram,
    pub t: f64,
}

/// Per-step prediction errors `delta_i` and the drift they accumulate,
/// `gamma = sum_i (alpha_i - alpha_{i-1}) * delta_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftRecord {
    pub deltas: Vec<ResidualField>,
    pub weights: Vec<f64>,
    pub gamma: ResidualField,
}

impl DriftRecord {
    pub fn new(n_angles: usize, n_bins: usize) -> Self {
        Self {
            deltas: Vec::new(),
            weights: Vec::new(),
            gamma: ResidualField::zeros(n_angles, n_bins),
        }
    }

    /// Records the error made on a step whose `alpha` span is `weight`.
    pub fn push(&mut self, weight: f64, delta: ResidualField) -> Result<()> {
        check_shape(self.gamma.shape(), delta.shape())?;
        for (g, &d) in self.gamma.values.iter_mut().zip(&delta.values) {
            *g = (*g as f64 + weight * d as f64) as f32;
        }
        self.weights.push(weight);
        self.deltas.push(delta);
        Ok(())
    }
}

/// `x_L - x_F`.
pub fn residual(x_low: &Sinogram, x_full: &Sinogram) -> Result<ResidualField> {
    check_shape(x_full.shape(), x_low.shape())?;
    Ok(ResidualField {
        n_angles: x_low.n_angles,
        n_bins: x_low.n_bins,
        values: x_low
            .values
            .iter()
            .zip(&x_full.values)
            .map(|(&l, &f)| l - f)
            .collect(),
    })
}

/// `x_t = (1 - alpha) x_F + alpha x_L`, which is exact at both endpoints and
/// never leaves the elementwise hull of `x_F` and `x_L`.
pub fn forward_sample(
    x_full: &Sinogram,
    x_low: &Sinogram,
    sched: &ResidualSchedule,
    t: f64,
) -> Result<DiffusionState> {
    check_shape(x_full.shape(), x_low.shape())?;
    sched.check_time(t)?;
    let a = sched.alpha(t);
    let values = x_full
        .values
        .iter()
        .zip(&x_low.values)
        .map(|(&f, &l)| ((1.0 - a) * f as f64 + a * l as f64) as f32)
        .collect();
    Ok(DiffusionState {
        x: Sinogram {
            values,
            ..Sinogram::zeros(x_full.n_angles, x_full.n_bins)
        },
        t,
    })
}

/// `x_s = x_t - (alpha(t) - alpha(s)) * eps_hat` for any `s < t`.
pub fn reverse_step(
    state: &DiffusionState,
    eps_hat: &ResidualField,
    s: f64,
    sched: &ResidualSchedule,
) -> Result<DiffusionState> {
    check_shape(state.x.shape(), eps_hat.shape())?;
    sched.check_time(s)?;
    if !(s < state.t) {
        return Err(RedError::InvalidArgument(format!(
            "reverse step must go backward in time ({s} >= {})",
            state.t
        )));
    }
    let span = sched.alpha(state.t) - sched.alpha(s);
    let values = state
        .x
        .values
        .iter()
        .zip(&eps_hat.values)
        .map(|(&x, &e)| (x as f64 - span * e as f64) as f32)
        .collect();
    Ok(DiffusionState {
        x: Sinogram {
            values,
            ..Sinogram::zeros(state.x.n_angles, state.x.n_bins)
        },
        t: s,
    })
}

/// `gamma_t = x_t - x_hat_t`.
pub fn compute_drift(x_true: &DiffusionState, x_pred: &DiffusionState) -> Result<ResidualField> {
    check_shape(x_true.x.shape(), x_pred.x.shape())?;
    if x_true.t != x_pred.t {
        return Err(RedError::InvalidArgument(format!(
            "drift between states at different times ({} vs {})",
            x_true.t, x_pred.t
        )));
    }
    Ok(ResidualField {
        n_angles: x_true.x.n_angles,
        n_bins: x_true.x.n_bins,
        values: x_true
            .x
            .values
            .iter()
            .zip(&x_pred.x.values)
            .map(|(&a, &b)| a - b)
            .collect(),
    })
}

/// Direction in which the predicted drift is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrectionSign {
    /// `x = x_hat + beta * gamma_hat`, consistent with `gamma = x - x_hat`.
    #[default]
    Plus,
    /// `x = x_hat - beta * gamma_hat`.
    Minus,
}

impl CorrectionSign {
    fn factor(self) -> f64 {
        match self {
            Self::Plus => 1.0,
            Self::Minus => -1.0,
        }
    }
}

impl std::str::FromStr for CorrectionSign {
    type Err = RedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "+" | "plus" => Ok(Self::Plus),
            "-" | "minus" => Ok(Self::Minus),
            other => Err(RedError::InvalidArgument(format!(
                "unknown correction sign '{other}'"
            ))),
        }
    }
}

/// `x = x_hat + beta(t) * gamma_hat` (sign per `sign`).
pub fn apply_correction(
    x_hat: &DiffusionState,
    gamma_hat: &ResidualField,
    sched: &ResidualSchedule,
    sign: CorrectionSign,
) -> Result<DiffusionState> {
    check_shape(x_hat.x.shape(), gamma_hat.shape())?;
    let w = sign.factor() * sched.beta(x_hat.t);
    if w == 0.0 {
        return Ok(x_hat.clone());
    }
    let values = x_hat
        .x
        .values
        .iter()
        .zip(&gamma_hat.values)
        .map(|(&x, &g)| (x as f64 + w * g as f64) as f32)
        .collect();
    Ok(DiffusionState {
        x: Sinogram {
            values,
            ..Sinogram::zeros(x_hat.x.n_angles, x_hat.x.n_bins)
        },
        t: x_hat.t,
    })
}

/// Anything that maps `(x, t)` to a residual-shaped prediction: the residual
/// estimator, the drift estimator, or a test oracle.
pub trait Predictor: Sync {
    fn predict(&self, x: &Sinogram, t: f64) -> Result<ResidualField>;
}

impl<F> Predictor for F
where
    F: Fn(&Sinogram, f64) -> Result<ResidualField> + Sync,
{
    fn predict(&self, x: &Sinogram, t: f64) -> Result<ResidualField> {
        self(x, t)
    }
}

/// Returns a fixed residual regardless of input.
#[derive(Debug, Clone)]
pub struct ConstantResidual(pub ResidualField);

impl Predictor for ConstantResidual {
    fn predict(&self, _x: &Sinogram, _t: f64) -> Result<ResidualField> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReverseOptions {
    pub sign: CorrectionSign,
}

/// Runs the reverse process from `x_L` at `t_max` down to `t = 0`.
///
/// At each grid step `t -> s` the residual estimator proposes
/// `x_hat_s = x_t - (alpha(t) - alpha(s)) * ren(x_t, t)`; when a drift
/// estimator is supplied and `beta(s) != 0` the state becomes
/// `x_s = x_hat_s + beta(s) * dcn(x_hat_s, s)`. `on_step` sees the initial
/// state (index 0) and every state after it. No clamping is applied.
pub fn reconstruct_with<F>(
    x_low: &Sinogram,
    ren: &dyn Predictor,
    dcn: Option<&dyn Predictor>,
    sched: &ResidualSchedule,
    grid: &TimeGrid,
    opts: ReverseOptions,
    mut on_step: F,
) -> Result<Sinogram>
where
    F: FnMut(usize, &DiffusionState),
{
    let t_max = sched.t_max as f64;
    if grid.times.first() != Some(&t_max) || grid.times.last() != Some(&0.0) {
        return Err(RedError::InvalidArgument(
            "time grid must run from t_max to 0".into(),
        ));
    }
    let mut state = DiffusionState {
        x: Sinogram {
            scale: None,
            ..x_low.clone()
        },
        t: t_max,
    };
    on_step(0, &state);
    for (k, (t, s)) in grid.steps().enumerate() {
        let eps_hat = ren.predict(&state.x, t)?;
        check_shape(state.x.shape(), eps_hat.shape())?;
        let x_hat = reverse_step(&state, &eps_hat, s, sched)?;
        state = match dcn {
            Some(dcn) if sched.beta(s) != 0.0 => {
                let gamma_hat = dcn.predict(&x_hat.x, s)?;
                check_shape(x_hat.x.shape(), gamma_hat.shape())?;
                apply_correction(&x_hat, &gamma_hat, sched, opts.sign)?
            }
            _ => x_hat,
        };
        on_step(k + 1, &state);
    }
    Ok(state.x)
}

pub fn reconstruct(
    x_low: &Sinogram,
    ren: &dyn Predictor,
    dcn: Option<&dyn Predictor>,
    sched: &ResidualSchedule,
    grid: &TimeGrid,
) -> Result<Sinogram> {
    reconstruct_with(x_low, ren, dcn, sched, grid, ReverseOptions::default(), |_, _| {})
}

/// How the residual is defined when Gaussian noise is mixed into the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixedMode {
    /// `eps = (x_L + sigma * n) - x_F`: the difference of the noisy pair.
    Supervised,
    /// `eps = sigma * n`; `x_L` is ignored and the residual is pure noise.
    Unsupervised,
}

impl std::str::FromStr for MixedMode {
    type Err = RedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "unsupervised" => Ok(Self::Unsupervised),
            other => Err(RedError::InvalidArgument(format!(
                "unknown mixed-noise mode '{other}'"
            ))),
        }
    }
}

/// Forward sample with an `alpha(t)`-weighted Gaussian perturbation.
///
/// Returns the state together with the residual it was built from, which is
/// the regression target for the residual estimator.
#[allow(clippy::too_many_arguments)]
pub fn mixed_forward_sample(
    x_full: &Sinogram,
    x_low: &Sinogram,
    sched: &ResidualSchedule,
    t: f64,
    sigma: f64,
    seed: u64,
    mode: MixedMode,
) -> Result<(DiffusionState, ResidualField)> {
    check_shape(x_full.shape(), x_low.shape())?;
    sched.check_time(t)?;
    if !(sigma >= 0.0) {
        return Err(RedError::InvalidArgument(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    let eps: Vec<f32> = (0..x_full.values.len())
        .map(|i| {
            let noise = if sigma > 0.0 {
                let z: f64 = bin_rng(seed, i).sample(rand_distr::StandardNormal);
                sigma * z
            } else {
                0.0
            };
            match mode {
                MixedMode::Supervised => {
                    ((x_low.values[i] as f64 + noise) - x_full.values[i] as f64) as f32
                }
                MixedMode::Unsupervised => noise as f32,
            }
        })
        .collect();
    let eps = ResidualField {
        n_angles: x_full.n_angles,
        n_bins: x_full.n_bins,
        values: eps,
    };
    if sigma == 0.0 && mode == MixedMode::Supervised {
        return Ok((forward_sample(x_full, x_low, sched, t)?, eps));
    }
    let a = sched.alpha(t);
    let values = x_full
        .values
        .iter()
        .zip(&eps.values)
        .map(|(&f, &e)| (f as f64 + a * e as f64) as f32)
        .collect();
    let state = DiffusionState {
        x: Sinogram {
            values,
            ..Sinogram::zeros(x_full.n_angles, x_full.n_bins)
        },
        t,
    };
    Ok((state, eps))
}

#[cfg(test)]
mod tests;
