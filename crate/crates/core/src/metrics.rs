//! PSNR, SSIM and NRMSE, plus the per-slice report written by the evaluator.
//!
//! SSIM comes in two flavours. `Global` uses whole-array statistics, which is
//! what the training loss differentiates by default. `Windowed` averages the
//! index over every 11x11 Gaussian window (sigma 1.5) that fits inside the
//! array, the usual convention for reporting. Both return gradients.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{check_shape, RedError, Result};
use crate::estimator::Real;

/// PSNR in dB, or `Infinite` when the inputs are identical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn db(self) -> f64 {
        match self {
            Self::Finite(v) => v,
            Self::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Self::Infinite)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(v) => write!(f, "{v:.6}"),
            Self::Infinite => f.write_str("inf"),
        }
    }
}

pub fn psnr<T: Real>(x: &[T], reference: &[T], data_range: f64) -> Result<Psnr> {
    check_shape((reference.len(), 1), (x.len(), 1))?;
    if !(data_range > 0.0) {
        return Err(RedError::InvalidArgument(format!(
            "data range must be positive, got {data_range}"
        )));
    }
    if x.is_empty() {
        return Err(RedError::InvalidArgument("empty input".into()));
    }
    let sse: f64 = x
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a.f64() - b.f64()).powi(2))
        .sum();
    if sse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    let mse = sse / x.len() as f64;
    Ok(Psnr::Finite(10.0 * (data_range * data_range / mse).log10()))
}

/// `||x - ref||_2 / ||ref||_2`.
pub fn nrmse<T: Real>(x: &[T], reference: &[T]) -> Result<f64> {
    check_shape((reference.len(), 1), (x.len(), 1))?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(reference) {
        num += (a.f64() - b.f64()).powi(2);
        den += b.f64().powi(2);
    }
    if den == 0.0 {
        return Err(RedError::InvalidArgument(
            "nrmse reference has zero norm".into(),
        ));
    }
    Ok((num / den).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsimMode {
    Global,
    Windowed,
}

impl std::str::FromStr for SsimMode {
    type Err = RedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "windowed" => Ok(Self::Windowed),
            other => Err(RedError::InvalidArgument(format!("unknown ssim mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub c1: f64,
    pub c2: f64,
    pub mode: SsimMode,
}

impl SsimConfig {
    pub const WINDOW: usize = 11;
    pub const WINDOW_SIGMA: f64 = 1.5;

    /// `c1 = (0.01 R)^2`, `c2 = (0.03 R)^2` for data range `R`.
    pub fn for_range(data_range: f64, mode: SsimMode) -> Self {
        Self {
            c1: (0.01 * data_range).powi(2),
            c2: (0.03 * data_range).powi(2),
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(RedError::InvalidArgument(format!(
                "ssim constants must be positive, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        Ok(())
    }
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self::for_range(1.0, SsimMode::Windowed)
    }
}

/// SSIM of `x` against `y`, both row-major with `shape = (rows, cols)`.
///
/// Arrays smaller than the window in either direction are scored with global
/// statistics.
pub fn ssim<T: Real>(x: &[T], y: &[T], shape: (usize, usize), cfg: &SsimConfig) -> Result<f64> {
    ssim_impl(x, y, shape, cfg, false).map(|(s, _)| s)
}

/// SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad<T: Real>(
    x: &[T],
    y: &[T],
    shape: (usize, usize),
    cfg: &SsimConfig,
) -> Result<(f64, Vec<T>)> {
    ssim_impl(x, y, shape, cfg, true).map(|(s, g)| (s, g.into_iter().map(T::of).collect()))
}

fn ssim_impl<T: Real>(
    x: &[T],
    y: &[T],
    shape: (usize, usize),
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let (rows, cols) = shape;
    check_shape((rows * cols, 1), (x.len(), 1))?;
    check_shape((rows * cols, 1), (y.len(), 1))?;
    if x.is_empty() {
        return Err(RedError::InvalidArgument("empty input".into()));
    }
    let x: Vec<f64> = x.iter().map(|v| v.f64()).collect();
    let y: Vec<f64> = y.iter().map(|v| v.f64()).collect();
    let w = SsimConfig::WINDOW;
    if cfg.mode == SsimMode::Global || rows < w || cols < w {
        Ok(global(&x, &y, cfg, want_grad))
    } else {
        Ok(windowed(&x, &y, shape, cfg, want_grad))
    }
}

/// Index from means, variances and covariance, with its partial derivatives
/// with respect to `(mu_x, E[x^2], E[xy])`.
fn index_and_partials(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, cfg: &SsimConfig) -> (f64, [f64; 3]) {
    let a1 = 2.0 * mx * my + cfg.c1;
    let a2 = 2.0 * cxy + cfg.c2;
    let b1 = mx * mx + my * my + cfg.c1;
    let b2 = vx + vy + cfg.c2;
    let s = a1 * a2 / (b1 * b2);
    let d_mx = s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2);
    let d_exx = -s / b2;
    let d_exy = 2.0 * s / a2;
    (s, [d_mx, d_exx, d_exy])
}

fn global(x: &[f64], y: &[f64], cfg: &SsimConfig, want_grad: bool) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let mean = |v: &mut dyn Iterator<Item = f64>| v.sum::<f64>() / n;
    let mx = mean(&mut x.iter().copied());
    let my = mean(&mut y.iter().copied());
    let vx = mean(&mut x.iter().map(|&a| (a - mx) * (a - mx)));
    let vy = mean(&mut y.iter().map(|&b| (b - my) * (b - my)));
    let cxy = mean(&mut x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)));
    let (s, [d_mx, d_exx, d_exy]) =
        index_and_partials(mx, my, vx, vy, cxy, cfg);
    if !want_grad {
        return (s, Vec::new());
    }
    let grad = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| (d_mx + 2.0 * a * d_exx + b * d_exy) / n)
        .collect();
    (s, grad)
}

fn gaussian_window() -> Vec<f64> {
    let w = SsimConfig::WINDOW;
    let c = (w / 2) as f64;
    let g: Vec<f64> = (0..w)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SsimConfig::WINDOW_SIGMA.powi(2))).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Valid-region separable correlation: `out[q] = sum_w g[w] * v[q + w]` in
/// both directions.
fn filter_valid(v: &[f64], rows: usize, cols: usize, g: &[f64]) -> Vec<f64> {
    let w = g.len();
    let (orow, ocol) = (rows - w + 1, cols - w + 1);
    let mut tmp = vec![0.0; rows * ocol];
    for r in 0..rows {
        for c in 0..ocol {
            tmp[r * ocol + c] = (0..w).map(|k| g[k] * v[r * cols + c + k]).sum();
        }
    }
    let mut out = vec![0.0; orow * ocol];
    for r in 0..orow {
        for c in 0..ocol {
            out[r * ocol + c] = (0..w).map(|k| g[k] * tmp[(r + k) * ocol + c]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(u: &[f64], rows: usize, cols: usize, g: &[f64]) -> Vec<f64> {
    let w = g.len();
    let (orow, ocol) = (rows - w + 1, cols - w + 1);
    let mut tmp = vec![0.0; rows * ocol];
    for r in 0..orow {
        for c in 0..ocol {
            let val = u[r * ocol + c];
            for k in 0..w {
                tmp[(r + k) * ocol + c] += g[k] * val;
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..ocol {
            let val = tmp[r * ocol + c];
            for k in 0..w {
                out[r * cols + c + k] += g[k] * val;
            }
        }
    }
    out
}

fn windowed(x: &[f64], y: &[f64], shape: (usize, usize), cfg: &SsimConfig, want_grad: bool) -> (f64, Vec<f64>) {
    let (rows, cols) = shape;
    let g = gaussian_window();
    let f = |v: &[f64]| filter_valid(v, rows, cols, &g);
    let mx = f(x);
    let my = f(y);
    let exx = f(&x.iter().map(|a| a * a).collect::<Vec<_>>());
    let eyy = f(&y.iter().map(|b| b * b).collect::<Vec<_>>());
    let exy = f(&x.iter().zip(y).map(|(a, b)| a * b).collect::<Vec<_>>());
    let q = mx.len() as f64;
    let mut total = 0.0;
    let (mut p_mx, mut p_exx, mut p_exy) = (vec![0.0; mx.len()], vec![0.0; mx.len()], vec![0.0; mx.len()]);
    for i in 0..mx.len() {
        let (vx, vy) = (exx[i] - mx[i] * mx[i], eyy[i] - my[i] * my[i]);
        let cxy = exy[i] - mx[i] * my[i];
        let (s, [a, b, c]) = index_and_partials(mx[i], my[i], vx, vy, cxy, cfg);
        total += s;
        p_mx[i] = a / q;
        p_exx[i] = b / q;
        p_exy[i] = c / q;
    }
    if !want_grad {
        return (total / q, Vec::new());
    }
    let adj = |u: &[f64]| filter_valid_adjoint(u, rows, cols, &g);
    let (ga, gb, gc) = (adj(&p_mx), adj(&p_exx), adj(&p_exy));
    let grad = (0..x.len())
        .map(|p| ga[p] + 2.0 * x[p] * gb[p] + y[p] * gc[p])
        .collect();
    (total / q, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Sinogram,
    Image,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sinogram => "sinogram",
            Self::Image => "image",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub slice: String,
    pub domain: Domain,
    pub method: String,
    pub psnr: Psnr,
    pub ssim: f64,
    pub nrmse: f64,
}

impl MetricsRecord {
    /// Scores `x` against `reference` with the reference max as PSNR range.
    pub fn score(
        slice: impl Into<String>,
        domain: Domain,
        method: impl Into<String>,
        x: &[f32],
        reference: &[f32],
        shape: (usize, usize),
    ) -> Result<Self> {
        let range = reference.iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
        let range = if range > 0.0 { range } else { 1.0 };
        Ok(Self {
            slice: slice.into(),
            domain,
            method: method.into(),
            psnr: psnr(x, reference, range)?,
            ssim: ssim(x, reference, shape, &SsimConfig::for_range(range, SsimMode::Windowed))?,
            nrmse: nrmse(x, reference)?,
        })
    }
}

/// Per-slice records plus per-(domain, method) means.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<MetricsRecord>,
}

pub const METRICS_HEADER: &str = "slice,domain,method,psnr_db,ssim,nrmse";

/// Conventions behind the report columns, written next to the CSV.
pub const METRICS_CONVENTIONS: &str = "key,value
psnr_db,10 log10(R^2 / MSE) with R = max(reference)
ssim,11x11 gaussian window sigma 1.5; c1 = (0.01 R)^2; c2 = (0.03 R)^2
nrmse,||x - reference||_2 / ||reference||_2
";

impl MetricsReport {
    pub fn push(&mut self, record: MetricsRecord) {
        self.records.push(record);
    }

    /// Means per `(domain, method)` in first-appearance order. A group whose
    /// PSNR is infinite on every slice keeps the infinite flag; otherwise
    /// infinite entries are left out of the PSNR mean.
    pub fn aggregates(&self) -> Vec<MetricsRecord> {
        let mut keys: Vec<(Domain, &str)> = Vec::new();
        for r in &self.records {
            if !keys.contains(&(r.domain, r.method.as_str())) {
                keys.push((r.domain, r.method.as_str()));
            }
        }
        keys.into_iter()
            .map(|(domain, method)| {
                let group: Vec<&MetricsRecord> = self
                    .records
                    .iter()
                    .filter(|r| r.domain == domain && r.method == method)
                    .collect();
                let n = group.len() as f64;
                let finite: Vec<f64> = group
                    .iter()
                    .filter_map(|r| match r.psnr {
                        Psnr::Finite(v) => Some(v),
                        Psnr::Infinite => None,
                    })
                    .collect();
                let psnr = if finite.is_empty() {
                    Psnr::Infinite
                } else {
                    Psnr::Finite(finite.iter().sum::<f64>() / finite.len() as f64)
                };
                MetricsRecord {
                    slice: "MEAN".into(),
                    domain,
                    method: method.to_string(),
                    psnr,
                    ssim: group.iter().map(|r| r.ssim).sum::<f64>() / n,
                    nrmse: group.iter().map(|r| r.nrmse).sum::<f64>() / n,
                }
            })
            .collect()
    }

    pub fn mean_psnr(&self, domain: Domain, method: &str) -> Option<f64> {
        self.aggregates()
            .into_iter()
            .find(|r| r.domain == domain && r.method == method)
            .map(|r| r.psnr.db())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in self.records.iter().chain(self.aggregates().iter()) {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6}\n",
                r.slice,
                r.domain.as_str(),
                r.method,
                r.psnr,
                r.ssim,
                r.nrmse
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| RedError::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| RedError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn psnr_cases() {
        let r = vec![0.0f64; 100];
        assert!(psnr(&r, &r, 1.0).unwrap().is_infinite());
        let x = vec![0.1f64; 100];
        assert!((psnr(&x, &r, 1.0).unwrap().db() - 20.0).abs() < 1e-12);
        let x = vec![0.01f64; 100];
        assert!((psnr(&x, &r, 1.0).unwrap().db() - 40.0).abs() < 1e-12);
        assert!(psnr(&x, &r[..10], 1.0).is_err());
        assert!(psnr(&[1.0f32], &[1.0], f64::NAN).is_err());
        assert!(psnr(&x, &r, 0.0).is_err());
    }

    #[test]
    fn psnr_decreases_along_noise_ladder() {
        let r: Vec<f32> = rand_vec(1, 400).into_iter().map(|v| v as f32).collect();
        let r = &r[..];
        let n = rand_vec(2, 400);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let x: Vec<f32> = r.iter().zip(&n).map(|(&a, &b)| a + (amp * (b - 0.5)) as f32).collect();
            let p = psnr(&x, r, 1.0).unwrap().db();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn nrmse_cases() {
        let r = vec![1.0f64, 2.0, -3.0, 0.5];
        assert_eq!(nrmse(&r, &r).unwrap(), 0.0);
        let x: Vec<f64> = r.iter().map(|v| v * 2.0).collect();
        assert_eq!(nrmse(&x, &r).unwrap(), 1.0);
        let x: Vec<f64> = r.iter().map(|v| v * 1.1).collect();
        assert!((nrmse(&x, &r).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(nrmse(&[0.0; 4], &r).unwrap(), 1.0);
        assert!(nrmse(&r, &[0.0; 4]).is_err());
    }

    #[test]
    fn ssim_identity_both_modes() {
        let x = rand_vec(3, 20 * 24);
        for mode in [SsimMode::Global, SsimMode::Windowed] {
            let cfg = SsimConfig::for_range(1.0, mode);
            assert!((ssim(&x, &x, (20, 24), &cfg).unwrap() - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = x.iter().map(|v| v + 3.0).collect();
            assert!((ssim(&shifted, &shifted, (20, 24), &cfg).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ssim_zero_against_one_global() {
        let cfg = SsimConfig::for_range(1.0, SsimMode::Global);
        let s = ssim(&[0.0f64; 16], &[1.0; 16], (4, 4), &cfg).unwrap();
        let c1 = cfg.c1;
        assert!((s - c1 / (1.0 + c1)).abs() < 1e-15);
    }

    #[test]
    fn ssim_gradient_matches_central_differences() {
        let (rows, cols) = (14, 13);
        let x = rand_vec(5, rows * cols);
        let y = rand_vec(6, rows * cols);
        for mode in [SsimMode::Global, SsimMode::Windowed] {
            let cfg = SsimConfig::for_range(1.0, mode);
            let (_, g) = ssim_with_grad(&x, &y, (rows, cols), &cfg).unwrap();
            let h = 1e-4;
            for p in (0..x.len()).step_by(7) {
                let mut xp = x.clone();
                xp[p] += h;
                let mut xm = x.clone();
                xm[p] -= h;
                let fd = (ssim(&xp, &y, (rows, cols), &cfg).unwrap()
                    - ssim(&xm, &y, (rows, cols), &cfg).unwrap())
                    / (2.0 * h);
                let err = (fd - g[p]).abs() / fd.abs().max(g[p].abs()).max(1e-6);
                assert!(err < 1e-4, "{mode:?} p={p}: {fd} vs {}", g[p]);
            }
        }
    }

    #[test]
    fn filter_adjoint_identity() {
        let (rows, cols) = (15, 17);
        let g = gaussian_window();
        let v = rand_vec(8, rows * cols);
        let u = rand_vec(9, (rows - 10) * (cols - 10));
        let lhs: f64 = filter_valid(&v, rows, cols, &g).iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs: f64 = filter_valid_adjoint(&u, rows, cols, &g).iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn report_csv_layout() {
        let mut rep = MetricsReport::default();
        assert_eq!(rep.to_csv(), format!("{METRICS_HEADER}\n"));
        let r = vec![1.0f32; 16];
        let x = vec![1.5f32; 16];
        rep.push(MetricsRecord::score("0", Domain::Sinogram, "low", &x, &r, (4, 4)).unwrap());
        rep.push(MetricsRecord::score("1", Domain::Sinogram, "low", &r, &r, (4, 4)).unwrap());
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("1,sinogram,low,inf,1.000000,0.000000"));
        assert!(lines[3].starts_with("MEAN,sinogram,low,6.020600,"));
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric(seed in any::<u64>(), windowed in any::<bool>()) {
            let (rows, cols) = (12, 12);
            let x = rand_vec(seed, rows * cols);
            let y = rand_vec(seed ^ 0xabcdef, rows * cols);
            let mode = if windowed { SsimMode::Windowed } else { SsimMode::Global };
            let cfg = SsimConfig::for_range(1.0, mode);
            let a = ssim(&x, &y, (rows, cols), &cfg).unwrap();
            let b = ssim(&y, &x, (rows, cols), &cfg).unwrap();
            prop_assert!(a == b, "{} vs {}", a, b);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn nrmse_scale_invariant(seed in any::<u64>(), k in 0u32..8) {
            let a = 2f32.powi(k as i32 - 3);
            let r: Vec<f32> = rand_vec(seed, 50).into_iter().map(|v| v as f32 + 0.1).collect();
            let x: Vec<f32> = rand_vec(seed + 1, 50).into_iter().map(|v| v as f32).collect();
            let ra: Vec<f32> = r.iter().map(|v| v * a).collect();
            let xa: Vec<f32> = x.iter().map(|v| v * a).collect();
            prop_assert_eq!(nrmse(&xa, &ra).unwrap(), nrmse(&x, &r).unwrap());
        }
    }
}
