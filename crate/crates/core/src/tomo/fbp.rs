use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{back_project, Image, ProjectionGeometry, Sinogram};
use crate::error::{RedError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Ramp,
    RampHann,
}

impl std::str::FromStr for FilterKind {
    type Err = RedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(Self::Ramp),
            "ramp-hann" | "hann" => Ok(Self::RampHann),
            other => Err(RedError::InvalidArgument(format!("unknown filter '{other}'"))),
        }
    }
}

/// Frequency response of the filter on an `n`-point DFT grid, in DFT order.
pub fn ramp_response(n: usize, bin_spacing: f64, kind: FilterKind) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let folded = k.min(n - k) as f64;
            let freq = folded / (n as f64 * bin_spacing);
            let window = match kind {
                FilterKind::Ramp => 1.0,
                FilterKind::RampHann => {
                    0.5 * (1.0 + (2.0 * std::f64::consts::PI * folded / n as f64).cos())
                }
            };
            freq * window
        })
        .collect()
}

/// Filtered back projection.
///
/// Each view is zero-padded to the next power of two at least twice the bin
/// count, multiplied by the ramp response in the Fourier domain, and the
/// filtered views are back projected with a `pi / n_angles` weight.
pub fn fbp(
    sino: &Sinogram,
    geom: &ProjectionGeometry,
    kind: FilterKind,
    clamp_nonnegative: bool,
) -> Result<Image> {
    geom.check_sinogram(sino)?;
    if sino.n_angles < 2 {
        return Err(RedError::InvalidArgument(
            "fbp needs at least two views".into(),
        ));
    }
    if sino.n_bins < 4 {
        return Err(RedError::InvalidArgument(format!(
            "fbp needs at least 4 detector bins, got {}",
            sino.n_bins
        )));
    }
    let n_pad = (2 * sino.n_bins).next_power_of_two();
    let response = ramp_response(n_pad, geom.bin_spacing, kind);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n_pad);
    let inv = planner.plan_fft_inverse(n_pad);

    let mut filtered = Sinogram::zeros(sino.n_angles, sino.n_bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_pad];
    for a in 0..sino.n_angles {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (c, &v) in buf.iter_mut().zip(sino.row(a)) {
            c.re = v as f64;
        }
        fwd.process(&mut buf);
        for (c, &h) in buf.iter_mut().zip(&response) {
            *c *= h;
        }
        inv.process(&mut buf);
        let out = &mut filtered.values[a * sino.n_bins..(a + 1) * sino.n_bins];
        for (o, c) in out.iter_mut().zip(&buf) {
            *o = (c.re / n_pad as f64) as f32;
        }
    }

    let mut img = back_project(&filtered, geom)?;
    let weight = (std::f64::consts::PI / sino.n_angles as f64 * geom.bin_spacing) as f32;
    for p in &mut img.pixels {
        *p *= weight;
        if clamp_nonnegative && *p < 0.0 {
            *p = 0.0;
        }
    }
    Ok(img)
}
