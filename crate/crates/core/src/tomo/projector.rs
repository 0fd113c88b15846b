//! Ray-driven linear-interpolation (Joseph) projector and its exact adjoint.
//!
//! Every bin is a line integral: the ray is stepped one pixel at a time along
//! whichever image axis it is most aligned with, the two straddling pixels are
//! linearly interpolated, and each step carries the path length
//! `1 / max(|cos|, |sin|)`. Both directions walk the same weights, so the
//! back projection is the transpose of the forward projection.

use rayon::prelude::*;

use super::{Image, ProjectionGeometry, Sinogram};
use crate::error::Result;

/// Angles per partial image in the back projection. Fixed so that the
/// reduction order never depends on the worker count.
const BACKPROJECT_CHUNK: usize = 8;

#[derive(Clone, Copy)]
struct View {
    cos: f64,
    sin: f64,
}

impl View {
    fn new(theta: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        Self { cos, sin }
    }
}

/// Calls `visit(pixel_index, weight)` for every pixel touched by one ray.
#[inline]
fn trace_ray<F: FnMut(usize, f64)>(view: View, s: f64, side: usize, mut visit: F) {
    let c = (side as f64 - 1.0) / 2.0;
    let last = side as isize - 1;
    let View { cos, sin } = view;
    if cos.abs() >= sin.abs() {
        // Step over rows; interpolate across columns.
        let w = 1.0 / cos.abs();
        for row in 0..side {
            let y = row as f64 - c;
            let t = (y - s * sin) / cos;
            let u = s * cos - t * sin + c;
            let i0 = u.floor();
            let frac = u - i0;
            let i0 = i0 as isize;
            if i0 >= 0 && i0 <= last {
                visit(row * side + i0 as usize, w * (1.0 - frac));
            }
            if i0 + 1 >= 0 && i0 < last {
                visit(row * side + (i0 + 1) as usize, w * frac);
            }
        }
    } else {
        // Step over columns; interpolate across rows.
        let w = 1.0 / sin.abs();
        for col in 0..side {
            let x = col as f64 - c;
            let t = (s * cos - x) / sin;
            let u = s * sin + t * cos + c;
            let j0 = u.floor();
            let frac = u - j0;
            let j0 = j0 as isize;
            if j0 >= 0 && j0 <= last {
                visit(j0 as usize * side + col, w * (1.0 - frac));
            }
            if j0 + 1 >= 0 && j0 < last {
                visit((j0 + 1) as usize * side + col, w * frac);
            }
        }
    }
}

#[inline]
fn bin_position(geom: &ProjectionGeometry, bin: usize) -> f64 {
    (bin as f64 - (geom.n_bins as f64 - 1.0) / 2.0) * geom.bin_spacing
}

fn project_view(img: &[f32], geom: &ProjectionGeometry, angle: usize, out: &mut [f32]) {
    let view = View::new(geom.angles[angle]);
    for (bin, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        trace_ray(view, bin_position(geom, bin), geom.image_side, |p, w| {
            acc += w * img[p] as f64;
        });
        *slot = acc as f32;
    }
}

fn backproject_view(row: &[f32], geom: &ProjectionGeometry, angle: usize, acc: &mut [f64]) {
    let view = View::new(geom.angles[angle]);
    for (bin, &v) in row.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let v = v as f64;
        trace_ray(view, bin_position(geom, bin), geom.image_side, |p, w| {
            acc[p] += w * v;
        });
    }
}

/// Discretized line integrals of `img` for every (angle, bin) pair.
pub fn forward_project(img: &Image, geom: &ProjectionGeometry) -> Result<Sinogram> {
    geom.check_image(img)?;
    let mut sino = Sinogram::zeros(geom.n_angles, geom.n_bins);
    sino.values
        .par_chunks_mut(geom.n_bins)
        .enumerate()
        .for_each(|(angle, out)| project_view(&img.pixels, geom, angle, out));
    Ok(sino)
}

/// Transpose of [`forward_project`].
pub fn back_project(sino: &Sinogram, geom: &ProjectionGeometry) -> Result<Image> {
    geom.check_sinogram(sino)?;
    let n = geom.image_side * geom.image_side;
    let angles: Vec<usize> = (0..geom.n_angles).collect();
    let partials: Vec<Vec<f64>> = angles
        .par_chunks(BACKPROJECT_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0f64; n];
            for &a in chunk {
                backproject_view(sino.row(a), geom, a, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0f64; n];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    Ok(Image {
        width: geom.image_side,
        height: geom.image_side,
        pixels: total.into_iter().map(|v| v as f32).collect(),
    })
}

/// Forward projection restricted to a subset of view indices; rows outside the
/// subset are left at zero.
pub(crate) fn forward_project_views(
    img: &Image,
    geom: &ProjectionGeometry,
    views: &[usize],
) -> Sinogram {
    let mut sino = Sinogram::zeros(geom.n_angles, geom.n_bins);
    let rows: Vec<Vec<f32>> = views
        .par_iter()
        .map(|&a| {
            let mut out = vec![0.0f32; geom.n_bins];
            project_view(&img.pixels, geom, a, &mut out);
            out
        })
        .collect();
    for (&a, row) in views.iter().zip(rows) {
        sino.values[a * geom.n_bins..(a + 1) * geom.n_bins].copy_from_slice(&row);
    }
    sino
}

/// Back projection restricted to a subset of view indices.
pub(crate) fn back_project_views(
    sino: &Sinogram,
    geom: &ProjectionGeometry,
    views: &[usize],
) -> Image {
    let n = geom.image_side * geom.image_side;
    let partials: Vec<Vec<f64>> = views
        .par_chunks(BACKPROJECT_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0f64; n];
            for &a in chunk {
                backproject_view(sino.row(a), geom, a, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0f64; n];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    Image {
        width: geom.image_side,
        height: geom.image_side,
        pixels: total.into_iter().map(|v| v as f32).collect(),
    }
}
