//! Low-dose simulation by Poisson thinning, and per-slice normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{RedError, Result};
use crate::tomo::Sinogram;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseConfig {
    /// Dose reduction factor, `>= 1`.
    pub drf: f64,
    /// Expected total counts of the full-dose acquisition.
    pub count_scale: f64,
    pub seed: u64,
}

impl DoseConfig {
    pub fn new(drf: f64, count_scale: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            drf,
            count_scale,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.drf >= 1.0) || !self.drf.is_finite() {
            return Err(RedError::InvalidArgument(format!(
                "dose reduction factor must be >= 1, got {}",
                self.drf
            )));
        }
        if !(self.count_scale > 0.0) || !self.count_scale.is_finite() {
            return Err(RedError::InvalidArgument(format!(
                "count scale must be positive, got {}",
                self.count_scale
            )));
        }
        Ok(())
    }
}

/// Affine map applied by [`normalize`]: `normalized = (raw - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleRecord {
    pub scale: f64,
    pub offset: f64,
}

impl ScaleRecord {
    pub const IDENTITY: ScaleRecord = ScaleRecord {
        scale: 1.0,
        offset: 0.0,
    };

    pub fn new(scale: f64, offset: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || !offset.is_finite() {
            return Err(RedError::InvalidArgument(format!(
                "scale record needs a finite positive scale, got {scale}"
            )));
        }
        Ok(Self { scale, offset })
    }

    #[inline]
    pub fn apply(&self, raw: f32) -> f32 {
        ((raw as f64 - self.offset) / self.scale) as f32
    }

    #[inline]
    pub fn restore(&self, normalized: f32) -> f32 {
        (normalized as f64 * self.scale + self.offset) as f32
    }
}

/// Independent RNG stream for one bin, keyed by `(seed, bin)`.
pub(crate) fn bin_rng(seed: u64, bin: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(bin as u64);
    rng
}

/// Poisson-thins a full-dose sinogram to `1 / drf` of its counts and rescales
/// the result back to full-dose magnitude.
///
/// Bin `i` draws `n ~ Poisson(full_i * count_scale / (drf * sum(full)))` and
/// returns `n * drf / count_scale * sum(full)`, so the output is an unbiased
/// estimate of the input. Each bin owns its own RNG stream, which makes the
/// output independent of how the work is scheduled.
pub fn simulate_low_dose(full: &Sinogram, cfg: &DoseConfig) -> Result<Sinogram> {
    cfg.validate()?;
    full.check_nonnegative()?;
    let total = full.sum();
    let mut out = Sinogram {
        scale: full.scale,
        ..Sinogram::zeros(full.n_angles, full.n_bins)
    };
    if total == 0.0 {
        return Ok(out);
    }
    let to_counts = cfg.count_scale / (cfg.drf * total);
    let to_values = cfg.drf * total / cfg.count_scale;
    out.values
        .par_iter_mut()
        .zip(full.values.par_iter())
        .enumerate()
        .for_each(|(i, (o, &v))| {
            let lambda = v as f64 * to_counts;
            let n = if lambda > 0.0 {
                let mut rng = bin_rng(cfg.seed, i);
                Poisson::new(lambda).expect("finite positive rate").sample(&mut rng)
            } else {
                0.0
            };
            *o = (n * to_values) as f32;
        });
    Ok(out)
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma`, one RNG stream
/// per bin.
pub fn add_gaussian_noise(sino: &Sinogram, sigma: f64, seed: u64) -> Result<Sinogram> {
    if !(sigma >= 0.0) {
        return Err(RedError::InvalidArgument(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    let mut out = sino.clone();
    out.values.par_iter_mut().enumerate().for_each(|(i, v)| {
        let z: f64 = bin_rng(seed, i).sample(rand_distr::StandardNormal);
        *v = (*v as f64 + sigma * z) as f32;
    });
    Ok(out)
}

/// Max-scales a sinogram into `[0, 1]`.
pub fn normalize(sino: &Sinogram) -> Result<(Sinogram, ScaleRecord)> {
    let max = sino.max();
    if !(max > 0.0) || !max.is_finite() {
        return Err(RedError::InvalidArgument(
            "cannot normalize a sinogram without a positive maximum".into(),
        ));
    }
    let record = ScaleRecord::new(max as f64, 0.0)?;
    Ok((normalize_with(sino, &record), record))
}

/// Applies an existing record, e.g. to put a full-dose target on the same
/// scale as its low-dose input.
pub fn normalize_with(sino: &Sinogram, record: &ScaleRecord) -> Sinogram {
    Sinogram {
        n_angles: sino.n_angles,
        n_bins: sino.n_bins,
        values: sino.values.iter().map(|&v| record.apply(v)).collect(),
        scale: Some(*record),
    }
}

pub fn denormalize(sino: &Sinogram, record: &ScaleRecord) -> Sinogram {
    Sinogram {
        n_angles: sino.n_angles,
        n_bins: sino.n_bins,
        values: sino.values.iter().map(|&v| record.restore(v)).collect(),
        scale: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(v: f32) -> Sinogram {
        Sinogram::from_vec(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn zero_in_zero_out() {
        let z = Sinogram::zeros(4, 5);
        for seed in 0..5 {
            let out = simulate_low_dose(&z, &DoseConfig::new(20.0, 1e6, seed).unwrap()).unwrap();
            assert!(out.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_bin_mean_is_unbiased() {
        // one bin holding all the counts: lambda = count_scale / drf = 100
        let full = single(3.0);
        let cfg = |seed| DoseConfig::new(4.0, 400.0, seed).unwrap();
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|s| simulate_low_dose(&full, &cfg(s)).unwrap().values[0] as f64)
            .sum::<f64>()
            / n as f64;
        // rescaled output = counts * 3 / 100, so its sd is 3 * sqrt(100) / 100
        let se = 3.0 * 10.0 / 100.0 / (n as f64).sqrt();
        assert!((mean - 3.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn relative_error_shrinks_with_count_scale() {
        let full = Sinogram::from_vec(8, 8, (0..64).map(|i| 1.0 + (i % 7) as f32).collect()).unwrap();
        let rel_err = |scale: f64| {
            let mut acc = 0.0;
            for seed in 0..40 {
                let out = simulate_low_dose(&full, &DoseConfig::new(1.0, scale, seed).unwrap()).unwrap();
                let num: f64 = out.values.iter().zip(&full.values).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
                let den: f64 = full.values.iter().map(|&b| (b as f64).powi(2)).sum();
                acc += (num / den).sqrt();
            }
            acc / 40.0
        };
        let (lo, hi) = (rel_err(1e4), rel_err(1e6));
        // 100x more counts -> 10x smaller error
        let ratio = lo / hi;
        assert!((ratio - 10.0).abs() < 1.5, "ratio {ratio}");
    }

    #[test]
    fn thinning_is_nonnegative_and_seeded() {
        let full = Sinogram::from_vec(6, 6, (0..36).map(|i| (i as f32).sin().abs()).collect()).unwrap();
        let cfg = DoseConfig::new(100.0, 1e4, 9).unwrap();
        let a = simulate_low_dose(&full, &cfg).unwrap();
        let b = simulate_low_dose(&full, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_invalid_config_and_input() {
        assert!(DoseConfig::new(0.5, 1e6, 0).is_err());
        assert!(DoseConfig::new(4.0, 0.0, 0).is_err());
        let cfg = DoseConfig::new(4.0, 1e6, 0).unwrap();
        assert!(simulate_low_dose(&single(-1.0), &cfg).is_err());
    }

    #[test]
    fn constant_normalizes_to_one() {
        let s = Sinogram::from_vec(3, 3, vec![2.7; 9]).unwrap();
        let (n, rec) = normalize(&s).unwrap();
        assert!(n.values.iter().all(|&v| v == 1.0));
        assert_eq!(rec.scale, 2.7f32 as f64);
        assert_eq!(denormalize(&n, &rec).values, s.values);
    }

    #[test]
    fn zero_denormalizes_to_zero_and_zero_fails_normalize() {
        let rec = ScaleRecord::new(13.0, 0.0).unwrap();
        let z = Sinogram::zeros(2, 2);
        assert!(denormalize(&z, &rec).values.iter().all(|&v| v == 0.0));
        assert!(normalize(&z).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_one_ulp(vals in prop::collection::vec(0.0f32..1e6, 1..64)) {
            prop_assume!(vals.iter().any(|&v| v > 0.0));
            let s = Sinogram::from_vec(1, vals.len(), vals.clone()).unwrap();
            let (n, rec) = normalize(&s).unwrap();
            prop_assert!(n.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let back = denormalize(&n, &rec);
            for (a, b) in back.values.iter().zip(&vals) {
                prop_assert!((a - b).abs() <= b.abs() * f32::EPSILON);
            }
        }

        #[test]
        fn power_of_two_scale_round_trips_bitwise(
            vals in prop::collection::vec(0.0f32..1.0, 1..64),
            exp in -20i32..20,
        ) {
            let rec = ScaleRecord::new(2f64.powi(exp), 0.0).unwrap();
            let s = Sinogram::from_vec(1, vals.len(), vals.clone()).unwrap();
            let back = denormalize(&normalize_with(&s, &rec), &rec);
            prop_assert_eq!(back.values, vals);
        }
    }
}
