//! Residual-proportion and drift-correction schedules, and the skip-sampling
//! time grid.

use crate::error::{RedError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = RedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(RedError::InvalidArgument(format!(
                "unknown schedule kind '{other}'"
            ))),
        }
    }
}

/// Tables of the residual proportion `alpha` and the correction weight `beta`
/// over integer times `0..=t_max`. `alpha(0) = 0` is the full-dose end,
/// `alpha(t_max) = 1` the low-dose end.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSchedule {
    pub t_max: usize,
    pub kind: ScheduleKind,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl ResidualSchedule {
    pub fn new(t_max: usize, kind: ScheduleKind, beta_const: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(RedError::InvalidArgument("t_max must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&beta_const) {
            return Err(RedError::InvalidArgument(format!(
                "beta must lie in [0, 1], got {beta_const}"
            )));
        }
        let tm = t_max as f64;
        let mut alpha: Vec<f64> = (0..=t_max)
            .map(|t| match kind {
                ScheduleKind::Linear => t as f64 / tm,
                ScheduleKind::Cosine => {
                    0.5 * (1.0 - (std::f64::consts::PI * t as f64 / tm).cos())
                }
            })
            .collect();
        alpha[0] = 0.0;
        alpha[t_max] = 1.0;
        Ok(Self {
            t_max,
            kind,
            alpha,
            beta: vec![beta_const; t_max + 1],
        })
    }

    pub fn alpha_table(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta_table(&self) -> &[f64] {
        &self.beta
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.t_max as f64).contains(&t) {
            return Err(RedError::TimeOutOfRange {
                t,
                t_max: self.t_max as f64,
            });
        }
        Ok(())
    }

    /// `alpha` at a possibly fractional time, linearly interpolated.
    /// Times outside `[0, t_max]` are clamped.
    pub fn alpha(&self, t: f64) -> f64 {
        interpolate(&self.alpha, t)
    }

    pub fn beta(&self, t: f64) -> f64 {
        interpolate(&self.beta, t)
    }

    /// Same schedule with a different constant correction weight.
    pub fn with_beta(&self, beta_const: f64) -> Result<Self> {
        Self::new(self.t_max, self.kind, beta_const)
    }
}

fn interpolate(table: &[f64], t: f64) -> f64 {
    let last = table.len() - 1;
    if !(t > 0.0) {
        return table[0];
    }
    if t >= last as f64 {
        return table[last];
    }
    let i = t.floor() as usize;
    let frac = t - i as f64;
    if frac == 0.0 {
        table[i]
    } else {
        table[i] + frac * (table[i + 1] - table[i])
    }
}

/// Descending sampling times `t_max = t_0 > t_1 > ... > t_{t_s} = 0` with
/// real-valued stride `t_max / t_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t_s: usize,
    pub stride: f64,
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(t_s: usize, t_max: usize) -> Result<Self> {
        if t_s == 0 || t_s > t_max {
            return Err(RedError::InvalidArgument(format!(
                "need 1 <= t_s <= t_max, got t_s = {t_s}, t_max = {t_max}"
            )));
        }
        let stride = t_max as f64 / t_s as f64;
        let mut times: Vec<f64> = (0..=t_s)
            .map(|k| t_max as f64 - k as f64 * stride)
            .collect();
        times[0] = t_max as f64;
        times[t_s] = 0.0;
        Ok(Self {
            t_s,
            stride,
            times,
        })
    }

    /// Consecutive `(t, s)` pairs with `s < t`.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_table() {
        let s = ResidualSchedule::new(4, ScheduleKind::Linear, 1.0).unwrap();
        assert_eq!(s.alpha_table(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn cosine_midpoint() {
        let s = ResidualSchedule::new(500, ScheduleKind::Cosine, 1.0).unwrap();
        assert!((s.alpha(250.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn endpoints_and_errors() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = ResidualSchedule::new(37, kind, 0.3).unwrap();
            assert_eq!(s.alpha(0.0), 0.0);
            assert_eq!(s.alpha(37.0), 1.0);
            assert_eq!(s.beta(0.0), 0.3);
            assert_eq!(s.beta(12.5), 0.3);
        }
        assert!(ResidualSchedule::new(0, ScheduleKind::Linear, 1.0).is_err());
        assert!(ResidualSchedule::new(10, ScheduleKind::Linear, 1.5).is_err());
    }

    #[test]
    fn grids() {
        let g = TimeGrid::new(5, 5).unwrap();
        assert_eq!(g.times, vec![5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
        let g = TimeGrid::new(50, 500).unwrap();
        assert_eq!(g.stride, 10.0);
        let expect: Vec<f64> = (0..=50).map(|k| 500.0 - 10.0 * k as f64).collect();
        assert_eq!(g.times, expect);
        let g = TimeGrid::new(30, 500).unwrap();
        assert_eq!(g.times.len(), 31);
        assert_eq!((g.times[0], g.times[30]), (500.0, 0.0));
        assert!(g.times.windows(2).all(|w| w[1] < w[0]));
        assert!(TimeGrid::new(0, 500).is_err());
        assert!(TimeGrid::new(501, 500).is_err());
    }

    proptest! {
        #[test]
        fn alpha_is_monotone(t1 in 0.0f64..500.0, t2 in 0.0f64..500.0, cos in any::<bool>()) {
            let kind = if cos { ScheduleKind::Cosine } else { ScheduleKind::Linear };
            let s = ResidualSchedule::new(500, kind, 1.0).unwrap();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(s.alpha(lo) <= s.alpha(hi));
        }
    }
}
