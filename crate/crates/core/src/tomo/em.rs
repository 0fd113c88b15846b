use super::projector::{back_project_views, forward_project_views};
use super::{back_project, forward_project, Image, ProjectionGeometry, Sinogram};
use crate::error::{RedError, Result};

/// `sum(b * ln(Ax) - Ax)` over bins. Bins with `Ax = 0` contribute 0 when
/// `b = 0` and negative infinity otherwise.
pub fn poisson_log_likelihood(measured: &Sinogram, predicted: &Sinogram) -> f64 {
    measured
        .values
        .iter()
        .zip(&predicted.values)
        .map(|(&b, &ax)| {
            let (b, ax) = (b as f64, ax as f64);
            if ax > 0.0 {
                b * ax.ln() - ax
            } else if b > 0.0 {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        })
        .sum()
}

fn check_inputs(sino: &Sinogram, geom: &ProjectionGeometry, init: &Image) -> Result<()> {
    geom.check_sinogram(sino)?;
    geom.check_image(init)?;
    sino.check_nonnegative()?;
    if let Some(p) = init.pixels.iter().position(|&v| !(v > 0.0)) {
        return Err(RedError::InvalidArgument(format!(
            "EM initial image must be strictly positive (pixel {p} = {})",
            init.pixels[p]
        )));
    }
    Ok(())
}

/// One multiplicative update `x <- x / sens * A^T(b / Ax)`.
fn em_update(x: &mut Image, measured: &Sinogram, predicted: &Sinogram, sens: &Image, bp: impl Fn(&Sinogram) -> Image) {
    let mut ratio = Sinogram::zeros(measured.n_angles, measured.n_bins);
    for ((r, &b), &ax) in ratio
        .values
        .iter_mut()
        .zip(&measured.values)
        .zip(&predicted.values)
    {
        // zero-denominator bins are skipped
        *r = if ax > 0.0 { b / ax } else { 0.0 };
    }
    let correction = bp(&ratio);
    for ((v, &c), &s) in x.pixels.iter_mut().zip(&correction.pixels).zip(&sens.pixels) {
        if s > 0.0 {
            *v = *v / s * c;
        }
    }
}

/// Maximum-likelihood expectation maximization.
pub fn mlem(
    sino: &Sinogram,
    geom: &ProjectionGeometry,
    n_iters: usize,
    init: &Image,
) -> Result<Image> {
    check_inputs(sino, geom, init)?;
    let ones = Sinogram {
        values: vec![1.0; sino.values.len()],
        ..Sinogram::zeros(sino.n_angles, sino.n_bins)
    };
    let sens = back_project(&ones, geom)?;
    let mut x = init.clone();
    for _ in 0..n_iters {
        let predicted = forward_project(&x, geom)?;
        em_update(&mut x, sino, &predicted, &sens, |r| {
            back_project(r, geom).expect("geometry checked")
        });
    }
    Ok(x)
}

/// Angle-interleaved subsets: subset `k` holds views `k, k + n, k + 2n, ...`.
pub fn osem_subsets(n_angles: usize, n_subsets: usize) -> Result<Vec<Vec<usize>>> {
    if n_subsets == 0 || n_subsets > n_angles {
        return Err(RedError::InvalidArgument(format!(
            "cannot split {n_angles} views into {n_subsets} subsets"
        )));
    }
    Ok((0..n_subsets)
        .map(|k| (k..n_angles).step_by(n_subsets).collect())
        .collect())
}

/// Ordered-subset EM. `n_iters` counts full passes over all subsets.
pub fn osem(
    sino: &Sinogram,
    geom: &ProjectionGeometry,
    n_iters: usize,
    n_subsets: usize,
    init: &Image,
) -> Result<Image> {
    let subsets = osem_subsets(sino.n_angles, n_subsets)?;
    check_inputs(sino, geom, init)?;
    let ones = Sinogram {
        values: vec![1.0; sino.values.len()],
        ..Sinogram::zeros(sino.n_angles, sino.n_bins)
    };
    let sens: Vec<Image> = subsets
        .iter()
        .map(|views| back_project_views(&ones, geom, views))
        .collect();
    let mut x = init.clone();
    for _ in 0..n_iters {
        for (views, s) in subsets.iter().zip(&sens) {
            let predicted = forward_project_views(&x, geom, views);
            em_update(&mut x, sino, &predicted, s, |r| {
                back_project_views(r, geom, views)
            });
        }
    }
    Ok(x)
}
