//! Analytic versus central-difference gradients, all in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::estimator::{net_backward, net_forward, net_init, EstimatorParams, NetArch};
use crate::metrics::{SsimConfig, SsimMode};
use crate::schedule::{ResidualSchedule, ScheduleKind};
use crate::training::{mse_loss, ren_loss, ssim_loss};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that near-zero gradients are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub const GRADCHECK_HEADER: &str = "check,coords,max_rel_err,pass";

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub coords: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn compare<F: Fn(&[f64]) -> f64>(
    name: &'static str,
    f: F,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
) -> GradCheck {
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    GradCheck {
        name,
        coords: coords.len(),
        max_rel_err: worst,
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn pick(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, k.min(len)).into_vec()
}

/// Runs the four checks; 330 coordinates in total.
pub fn run_gradchecks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // Network parameters, with a linear readout <u, net(x)> as the loss.
    let arch = NetArch::default();
    let shape = (12, 10);
    let n = shape.0 * shape.1;
    let mut params: EstimatorParams<f64> = net_init(&arch, seed)?.cast();
    let jitter = normal(&mut rng, params.len(), 0.02);
    params.values.iter_mut().zip(&jitter).for_each(|(p, j)| *p += j);
    let sched = ResidualSchedule::new(500, ScheduleKind::Linear, 1.0)?;
    let x = normal(&mut rng, n, 1.0);
    let u = normal(&mut rng, n, 1.0);
    let t = 137.0;
    let g = net_backward(&params, &x, shape, t, &sched, &u)?;
    let coords = pick(&mut rng, params.len(), 120);
    let readout = |v: &[f64]| {
        let p = EstimatorParams { arch: arch.clone(), values: v.to_vec() };
        let y = net_forward(&p, &x, shape, t, &sched).expect("valid shapes");
        y.iter().zip(&u).map(|(a, b)| a * b).sum()
    };
    out.push(compare("net_backward", readout, &params.values, &g, &coords));

    let pred = normal(&mut rng, 64, 1.0);
    let target = normal(&mut rng, 64, 1.0);
    let (_, g) = mse_loss(&pred, &target)?;
    let coords = pick(&mut rng, 64, 60);
    let f = |v: &[f64]| mse_loss(v, &target).expect("same length").0;
    out.push(compare("mse_loss", f, &pred, &g, &coords));

    // Windowed SSIM needs at least an 11x11 image.
    let shape = (16, 14);
    let n = shape.0 * shape.1;
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let xs: Vec<f64> = y.iter().map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let cfg = SsimConfig::for_range(1.0, SsimMode::Windowed);
    let (_, g) = ssim_loss(&xs, &y, shape, &cfg)?;
    let coords = pick(&mut rng, n, 60);
    let f = |v: &[f64]| ssim_loss(v, &y, shape, &cfg).expect("valid").0;
    out.push(compare("ssim_loss", f, &xs, &g, &coords));

    let eps = normal(&mut rng, n, 0.1);
    let eps_hat: Vec<f64> = eps.iter().map(|e| e + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
    let alpha = 0.6;
    let x_t: Vec<f64> = y.iter().zip(&eps).map(|(f, e)| f + alpha * e).collect();
    let (_, g) = ren_loss(&eps_hat, &eps, &x_t, &y, alpha, shape, 1.0, 1.0, &cfg)?;
    let coords = pick(&mut rng, n, 90);
    let f = |v: &[f64]| {
        ren_loss(v, &eps, &x_t, &y, alpha, shape, 1.0, 1.0, &cfg)
            .expect("valid")
            .0
            .total
    };
    out.push(compare("ren_loss", f, &eps_hat, &g, &coords));
    Ok(out)
}

pub fn gradcheck_csv(checks: &[GradCheck]) -> String {
    let mut s = format!("{GRADCHECK_HEADER}\n");
    for c in checks {
        s.push_str(&format!(
            "{},{},{:.3e},{}\n",
            c.name,
            c.coords,
            c.max_rel_err,
            c.passed()
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let checks = run_gradchecks(11).unwrap();
        assert_eq!(checks.len(), 4);
        assert!(checks.iter().map(|c| c.coords).sum::<usize>() >= 200);
        for c in &checks {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(2.0, 1.0), 0.5);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
