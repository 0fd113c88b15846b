//! Staged training: the residual estimator first, then the drift estimator on
//! samples drifted by the frozen residual estimator. The same loop also trains
//! the baselines (one-shot residual regression and Gaussian-noise DDIM).
//!
//! Each step draws `batch` samples up front from one seeded stream, evaluates
//! them in parallel, and reduces their gradients in sample order, so results
//! do not depend on the worker count.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffusion::ddim::NoiseSchedule;
use crate::diffusion::{forward_sample, mixed_forward_sample, MixedMode, Predictor, ResidualField};
use crate::dose::{normalize, normalize_with, ScaleRecord};
use crate::error::{check_shape, RedError, Result};
use crate::estimator::{adamw_step, forward_backward, net_forward_raw, net_init, EstimatorParams, NetArch, OptState, Real};
use crate::metrics::{ssim_with_grad, SsimConfig, SsimMode};
use crate::schedule::ResidualSchedule;
use crate::tomo::Sinogram;

/// A normalized full/low-dose pair sharing the low-dose max as scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub x_full: Sinogram,
    pub x_low: Sinogram,
    pub scale: ScaleRecord,
}

impl SlicePair {
    /// Normalizes both sinograms by the maximum of `low`, the only scale that
    /// is also available at inference time.
    pub fn new(full: &Sinogram, low: &Sinogram) -> Result<Self> {
        check_shape(full.shape(), low.shape())?;
        let (x_low, scale) = normalize(low)?;
        Ok(Self {
            x_full: normalize_with(full, &scale),
            x_low,
            scale,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.x_full.shape()
    }
}

/// Coefficient on the mixed residual when building drifted samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DriftCoeff {
    /// `alpha(t)`, consistent with the forward process.
    #[default]
    Alpha,
    /// `1 - alpha(t)`, the alternative printed form.
    OneMinusAlpha,
}

impl DriftCoeff {
    pub fn eval(self, alpha: f64) -> f64 {
        match self {
            Self::Alpha => alpha,
            Self::OneMinusAlpha => 1.0 - alpha,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::OneMinusAlpha => "one-minus-alpha",
        }
    }
}

impl std::str::FromStr for DriftCoeff {
    type Err = RedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "one-minus-alpha" => Ok(Self::OneMinusAlpha),
            other => Err(RedError::InvalidArgument(format!(
                "unknown drift coefficient '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: NetArch,
    pub n_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning rate halves every this many steps; 0 keeps it constant.
    pub decay_interval: u64,
    pub w_mse: f64,
    pub w_ssim: f64,
    pub ssim: SsimConfig,
    /// `lambda ~ Uniform(lambda_lo, lambda_hi)` for drifted samples.
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub coeff: DriftCoeff,
    /// Side of the random square crop each sample is trained on; 0 trains on
    /// whole slices.
    pub patch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: NetArch::default(),
            n_steps: 1000,
            batch: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            decay_interval: 0,
            w_mse: 1.0,
            w_ssim: 1.0,
            ssim: SsimConfig::for_range(1.0, SsimMode::Global),
            lambda_lo: 0.0,
            lambda_hi: 1.0,
            coeff: DriftCoeff::Alpha,
            patch: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.ssim.validate()?;
        let bad = |msg: String| Err(RedError::InvalidArgument(msg));
        if self.batch == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad(format!(
                "need lr > 0 and weight decay >= 0, got {} and {}",
                self.lr, self.weight_decay
            ));
        }
        if !(self.w_mse >= 0.0 && self.w_ssim >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        if !(0.0 <= self.lambda_lo && self.lambda_lo <= self.lambda_hi && self.lambda_hi <= 1.0) {
            return bad(format!(
                "lambda range [{}, {}] must lie in [0, 1]",
                self.lambda_lo, self.lambda_hi
            ));
        }
        Ok(())
    }
}

/// `mean((pred - target)^2)` and its gradient `2 (pred - target) / n`.
pub fn mse_loss<T: Real>(pred: &[T], target: &[T]) -> Result<(f64, Vec<T>)> {
    check_shape((target.len(), 1), (pred.len(), 1))?;
    if pred.is_empty() {
        return Err(RedError::InvalidArgument("empty input".into()));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &q)| {
            let d = p.f64() - q.f64();
            sum += d * d;
            T::of(2.0 * d / n)
        })
        .collect();
    Ok((sum / n, grad))
}

/// `1 - SSIM(x, y)` and its gradient with respect to `x`.
pub fn ssim_loss<T: Real>(x: &[T], y: &[T], shape: (usize, usize), cfg: &SsimConfig) -> Result<(f64, Vec<T>)> {
    let (s, g) = ssim_with_grad(x, y, shape, cfg)?;
    Ok((1.0 - s, g.into_iter().map(|v| -v).collect()))
}

/// Loss components of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub ssim: f64,
}

/// Residual estimator loss `w_mse * MSE(eps_hat, eps) + w_ssim * (1 - SSIM(x0_hat, x_F))`
/// with the one-step endpoint `x0_hat = x_t - alpha * eps_hat`, and its
/// gradient with respect to `eps_hat`.
#[allow(clippy::too_many_arguments)]
pub fn ren_loss<T: Real>(
    eps_hat: &[T],
    eps: &[T],
    x_t: &[T],
    x_full: &[T],
    alpha: f64,
    shape: (usize, usize),
    w_mse: f64,
    w_ssim: f64,
    ssim: &SsimConfig,
) -> Result<(LossParts, Vec<T>)> {
    check_shape((shape.0 * shape.1, 1), (eps_hat.len(), 1))?;
    for other in [eps, x_t, x_full] {
        check_shape((eps_hat.len(), 1), (other.len(), 1))?;
    }
    let (mse, mut grad) = mse_loss(eps_hat, eps)?;
    grad.iter_mut().for_each(|g| *g = T::of(g.f64() * w_mse));
    let mut parts = LossParts {
        total: w_mse * mse,
        mse,
        ssim: 0.0,
    };
    if w_ssim > 0.0 {
        let x0: Vec<T> = x_t
            .iter()
            .zip(eps_hat)
            .map(|(&x, &e)| T::of(x.f64() - alpha * e.f64()))
            .collect();
        let (l, g_x0) = ssim_loss(&x0, x_full, shape, ssim)?;
        // d x0 / d eps_hat = -alpha
        for (g, gx) in grad.iter_mut().zip(&g_x0) {
            *g = T::of(g.f64() - w_ssim * alpha * gx.f64());
        }
        parts.ssim = l;
        parts.total += w_ssim * l;
    }
    Ok((parts, grad))
}

/// Builds a drifted sample from a residual estimate `ren_eps` of `x_L`:
/// `x_hat_t = x_F + coeff(t) * (lambda * ren_eps + (1 - lambda) * eps)`.
/// Returns `(x_hat_t, x_t)` where `x_t` is the exact forward sample.
pub fn make_drifted_sample(
    pair: &SlicePair,
    ren_eps: &ResidualField,
    t: f64,
    lambda: f64,
    sched: &ResidualSchedule,
    coeff: DriftCoeff,
) -> Result<(Sinogram, Sinogram)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(RedError::InvalidArgument(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    check_shape(pair.shape(), ren_eps.shape())?;
    let x_t = forward_sample(&pair.x_full, &pair.x_low, sched, t)?.x;
    let (values, _) = drifted_values(
        &pair.x_full.values,
        &pair.x_low.values,
        &ren_eps.values,
        sched.alpha(t),
        lambda,
        coeff,
    );
    let x_hat = match values {
        Some(v) => Sinogram {
            values: v,
            ..Sinogram::zeros(pair.x_full.n_angles, pair.x_full.n_bins)
        },
        None => x_t.clone(),
    };
    Ok((x_hat, x_t))
}

/// Drifted values, or `None` when they coincide with the forward sample
/// (`lambda = 0` under the default coefficient), plus the drift target
/// `x_t - x_hat_t` computed in f64.
fn drifted_values(
    full: &[f32],
    low: &[f32],
    ren_eps: &[f32],
    alpha: f64,
    lambda: f64,
    coeff: DriftCoeff,
) -> (Option<Vec<f32>>, Vec<f32>) {
    if lambda == 0.0 && coeff == DriftCoeff::Alpha {
        return (None, vec![0.0; full.len()]);
    }
    let c = coeff.eval(alpha);
    let mut target = Vec::with_capacity(full.len());
    let values = full
        .iter()
        .zip(low)
        .zip(ren_eps)
        .map(|((&f, &l), &r)| {
            let (f, l, r) = (f as f64, l as f64, r as f64);
            let eps = l - f;
            let mixed = lambda * r + (1.0 - lambda) * eps;
            let x_hat = f + c * mixed;
            let x_t = f + alpha * eps;
            target.push((x_t - x_hat) as f32);
            x_hat as f32
        })
        .collect();
    (Some(values), target)
}

/// What the estimator is trained to predict.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    /// Residual `eps` from `x_t` at `t ~ U(0, T_MAX)`, optionally with mixed
    /// Gaussian noise of standard deviation `sigma`.
    Residual {
        sched: &'a ResidualSchedule,
        mixed: Option<(MixedMode, f64)>,
    },
    /// Residual from `x_L` alone (`t = T_MAX`), the single-step baseline.
    OneShot { sched: &'a ResidualSchedule },
    /// Drift `x_t - x_hat_t` from drifted samples; `ren_eps[i]` is the frozen
    /// residual estimator's prediction on `x_L` of pair `i` at `T_MAX`.
    Drift {
        sched: &'a ResidualSchedule,
        ren_eps: &'a [ResidualField],
    },
    /// Gaussian noise from `sqrt(ab) x_F + sqrt(1 - ab) n`, integer `t`.
    Noise { sched: &'a NoiseSchedule },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub parts: LossParts,
}

pub const LOSS_HEADER: &str = "step,loss_total,loss_mse,loss_ssim";

pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e}\n",
            r.step, r.parts.total, r.parts.mse, r.parts.ssim
        ));
    }
    out
}

pub fn write_loss_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| RedError::io(path, e))?;
    f.write_all(loss_trace_csv(trace).as_bytes())
        .map_err(|e| RedError::io(path, e))
}

pub fn parse_loss_trace(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_HEADER) {
        return Err(RedError::Format(format!("loss trace must start with '{LOSS_HEADER}'")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || RedError::Format(format!("loss trace row {}: '{line}'", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad())?,
                parts: LossParts {
                    total: num(f[1])?,
                    mse: num(f[2])?,
                    ssim: num(f[3])?,
                },
            })
        })
        .collect()
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| RedError::io(path, e))?;
    parse_loss_trace(&text)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EstimatorParams<f32>,
    pub opt: OptState,
    pub trace: Vec<LossRecord>,
}

/// Everything random about one training sample, drawn before evaluation.
#[derive(Debug, Clone, Copy)]
struct Draw {
    pair: usize,
    t: f64,
    lambda: f64,
    row0: usize,
    col0: usize,
    noise_seed: u64,
}

fn crop(v: &[f32], cols: usize, row0: usize, col0: usize, h: usize, w: usize) -> Vec<f32> {
    (row0..row0 + h)
        .flat_map(|r| v[r * cols + col0..r * cols + col0 + w].iter().copied())
        .collect()
}

/// Runs `cfg.n_steps` AdamW steps of `objective` starting from `init`, or from
/// a fresh seeded initialization.
pub fn train(
    data: &[SlicePair],
    cfg: &TrainConfig,
    objective: Objective<'_>,
    init: Option<EstimatorParams<f32>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(RedError::InvalidArgument("training set is empty".into()));
    }
    let shape = data[0].shape();
    for p in data {
        check_shape(shape, p.shape())?;
        check_shape(shape, p.x_low.shape())?;
    }
    if let Objective::Drift { ren_eps, .. } = objective {
        check_shape((data.len(), 1), (ren_eps.len(), 1))?;
    }
    let mut params = match init {
        Some(p) => {
            if p.arch != cfg.arch {
                return Err(RedError::ArchMismatch(
                    "initial parameters do not match the configured architecture".into(),
                ));
            }
            p.check()?;
            p
        }
        None => net_init(&cfg.arch, cfg.seed)?,
    };
    let mut opt = OptState::new(params.len(), cfg.lr, cfg.weight_decay, cfg.decay_interval);
    let (rows, cols) = shape;
    let (h, w) = if cfg.patch == 0 {
        (rows, cols)
    } else {
        (cfg.patch.min(rows), cfg.patch.min(cols))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e);
    let mut trace = Vec::with_capacity(cfg.n_steps);

    for step in 0..cfg.n_steps {
        let draws: Vec<Draw> = (0..cfg.batch)
            .map(|_| {
                let pair = rng.random_range(0..data.len());
                let t = match objective {
                    Objective::Residual { sched, .. } | Objective::Drift { sched, .. } => {
                        rng.random_range(0.0..=sched.t_max as f64)
                    }
                    Objective::OneShot { sched } => sched.t_max as f64,
                    Objective::Noise { sched } => rng.random_range(1..=sched.t_max) as f64,
                };
                let lambda = if cfg.lambda_hi > cfg.lambda_lo {
                    rng.random_range(cfg.lambda_lo..=cfg.lambda_hi)
                } else {
                    cfg.lambda_lo
                };
                Draw {
                    pair,
                    t,
                    lambda,
                    row0: rng.random_range(0..=rows - h),
                    col0: rng.random_range(0..=cols - w),
                    noise_seed: rng.random(),
                }
            })
            .collect();

        let results: Vec<(LossParts, Vec<f32>)> = draws
            .par_iter()
            .map(|d| sample_gradient(&params, data, cfg, objective, d, (rows, cols), (h, w)))
            .collect::<Result<_>>()?;

        let mut mean = LossParts::default();
        let mut acc = vec![0.0f64; params.len()];
        for (parts, g) in &results {
            mean.total += parts.total;
            mean.mse += parts.mse;
            mean.ssim += parts.ssim;
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v as f64;
            }
        }
        let b = cfg.batch as f64;
        mean.total /= b;
        mean.mse /= b;
        mean.ssim /= b;
        if !mean.total.is_finite() {
            return Err(RedError::NonFinite(format!("training loss at step {step}")));
        }
        let grads: Vec<f32> = acc.iter().map(|&a| (a / b) as f32).collect();
        adamw_step(&mut params, &grads, &mut opt)
            .map_err(|e| RedError::NonFinite(format!("step {step}: {e}")))?;
        trace.push(LossRecord { step, parts: mean });
    }
    Ok(TrainOutcome { params, opt, trace })
}

fn sample_gradient(
    params: &EstimatorParams<f32>,
    data: &[SlicePair],
    cfg: &TrainConfig,
    objective: Objective<'_>,
    d: &Draw,
    (_, cols): (usize, usize),
    (h, w): (usize, usize),
) -> Result<(LossParts, Vec<f32>)> {
    let pair = &data[d.pair];
    let cut = |v: &[f32]| crop(v, cols, d.row0, d.col0, h, w);
    let full = cut(&pair.x_full.values);
    let low = cut(&pair.x_low.values);
    let patch = |v: Vec<f32>| Sinogram {
        values: v,
        ..Sinogram::zeros(h, w)
    };
    let mse_only = |target: Vec<f32>| {
        move |out: &[f32]| {
            let (l, g) = mse_loss(out, &target)?;
            Ok((l, g))
        }
    };
    let residual = match objective {
        Objective::Residual { sched, mixed } => Some((sched, mixed)),
        Objective::OneShot { sched } => Some((sched, None)),
        _ => None,
    };
    if let Some((sched, mixed)) = residual {
        {
            let (xf, xl) = (patch(full), patch(low));
            let (x_t, eps) = match mixed {
                Some((mode, sigma)) => {
                    let (s, e) = mixed_forward_sample(&xf, &xl, sched, d.t, sigma, d.noise_seed, mode)?;
                    (s.x.values, e.values)
                }
                None => {
                    let s = forward_sample(&xf, &xl, sched, d.t)?;
                    let e = xl.values.iter().zip(&xf.values).map(|(&l, &f)| l - f).collect();
                    (s.x.values, e)
                }
            };
            let alpha = sched.alpha(d.t);
            let mut parts = LossParts::default();
            let (_, g) = forward_backward(params, &x_t, (h, w), alpha, |out: &[f32]| {
                let (p, g) = ren_loss(out, &eps, &x_t, &xf.values, alpha, (h, w), cfg.w_mse, cfg.w_ssim, &cfg.ssim)?;
                parts = p;
                Ok((p.total, g))
            })?;
            return Ok((parts, g));
        }
    }
    match objective {
        Objective::Drift { sched, ren_eps } => {
            let ren = cut(&ren_eps[d.pair].values);
            let alpha = sched.alpha(d.t);
            let (x_hat, target) = drifted_values(&full, &low, &ren, alpha, d.lambda, cfg.coeff);
            let x_hat = x_hat.unwrap_or_else(|| {
                forward_sample(&patch(full.clone()), &patch(low.clone()), sched, d.t)
                    .expect("validated time")
                    .x
                    .values
            });
            let (l, g) = forward_backward(params, &x_hat, (h, w), alpha, mse_only(target))?;
            Ok((LossParts { total: l, mse: l, ssim: 0.0 }, g))
        }
        Objective::Noise { sched } => {
            let mut nrng = ChaCha8Rng::seed_from_u64(d.noise_seed);
            let noise: Vec<f32> = (0..full.len())
                .map(|_| nrng.sample::<f64, _>(rand_distr::StandardNormal) as f32)
                .collect();
            let ab = sched.alpha_bar(d.t);
            let x_t = crate::diffusion::ddim::ddim_forward(&full, ab, &noise)?;
            let alpha = d.t / sched.t_max as f64;
            let (l, g) = forward_backward(params, &x_t, (h, w), alpha, mse_only(noise))?;
            Ok((LossParts { total: l, mse: l, ssim: 0.0 }, g))
        }
        Objective::Residual { .. } | Objective::OneShot { .. } => unreachable!("handled above"),
    }
}

pub fn train_ren(data: &[SlicePair], sched: &ResidualSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(data, cfg, Objective::Residual { sched, mixed: None }, None)
}

/// Trains the drift estimator against a frozen residual estimator.
pub fn train_dcn(
    data: &[SlicePair],
    ren: &dyn Predictor,
    sched: &ResidualSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_dcn_from(data, ren, sched, cfg, None)
}

/// As [`train_dcn`], continuing from `init` when given.
pub fn train_dcn_from(
    data: &[SlicePair],
    ren: &dyn Predictor,
    sched: &ResidualSchedule,
    cfg: &TrainConfig,
    init: Option<EstimatorParams<f32>>,
) -> Result<TrainOutcome> {
    let t_max = sched.t_max as f64;
    let ren_eps: Vec<ResidualField> = data
        .par_iter()
        .map(|p| ren.predict(&p.x_low, t_max))
        .collect::<Result<_>>()?;
    train(data, cfg, Objective::Drift { sched, ren_eps: &ren_eps }, init)
}

/// Noise predictor for the DDIM baseline; time enters the embedding as
/// `t / t_max`.
#[derive(Debug, Clone)]
pub struct NoisePredictor {
    pub params: EstimatorParams<f32>,
    pub t_max: usize,
}

impl Predictor for NoisePredictor {
    fn predict(&self, x: &Sinogram, t: f64) -> Result<ResidualField> {
        let out = net_forward_raw(&self.params, &x.values, x.shape(), t / self.t_max as f64)?;
        Ok(ResidualField {
            n_angles: x.n_angles,
            n_bins: x.n_bins,
            values: out,
        })
    }
}
