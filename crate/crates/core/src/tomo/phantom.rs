use rand::Rng;

use super::Image;
use crate::error::{RedError, Result};

/// Sub-samples per pixel edge used when rasterizing.
const SUPERSAMPLE: usize = 4;

/// One additive ellipse in field-of-view coordinates (`[-1, 1]` on both axes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    /// Counter-clockwise rotation in radians.
    pub rotation: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn disk(cx: f64, cy: f64, radius: f64, intensity: f64) -> Self {
        Self {
            cx,
            cy,
            semi_x: radius,
            semi_y: radius,
            rotation: 0.0,
            intensity,
        }
    }

    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhantomSpec {
    pub ellipses: Vec<Ellipse>,
}

impl PhantomSpec {
    /// A body ellipse with a handful of hot and cold inserts, all inside the
    /// inscribed circle of the field of view.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut ellipses = Vec::new();
        let body_x = rng.random_range(0.55..0.8);
        let body_y = rng.random_range(0.45..0.7);
        let body_rot = rng.random_range(-0.4..0.4);
        let body_level = rng.random_range(0.6..1.0);
        let body = Ellipse {
            cx: rng.random_range(-0.08..0.08),
            cy: rng.random_range(-0.08..0.08),
            semi_x: body_x,
            semi_y: body_y,
            rotation: body_rot,
            intensity: body_level,
        };
        ellipses.push(body);
        let n_hot = rng.random_range(2..6);
        for _ in 0..n_hot {
            let level = rng.random_range(0.3..2.0);
            ellipses.push(insert(rng, &body, 0.55, 0.2, level));
        }
        // At most two cold inserts, each removing under half of the body
        // level and placed well inside the body, so the sum stays >= 0.
        let n_cold = rng.random_range(0..3);
        for _ in 0..n_cold {
            let depth = -body_level * rng.random_range(0.2..0.45);
            ellipses.push(insert(rng, &body, 0.4, 0.12, depth));
        }
        Self { ellipses }
    }
}

fn insert<R: Rng + ?Sized>(
    rng: &mut R,
    body: &Ellipse,
    max_rad: f64,
    max_size: f64,
    intensity: f64,
) -> Ellipse {
    let r = rng.random_range(0.04..max_size);
    let ang = rng.random_range(0.0..std::f64::consts::TAU);
    let rad = rng.random_range(0.0..max_rad);
    let (u, v) = (rad * body.semi_x * ang.cos(), rad * body.semi_y * ang.sin());
    let (s, c) = body.rotation.sin_cos();
    Ellipse {
        cx: body.cx + u * c - v * s,
        cy: body.cy + u * s + v * c,
        semi_x: r,
        semi_y: r * rng.random_range(0.5..1.0),
        rotation: rng.random_range(0.0..std::f64::consts::PI),
        intensity,
    }
}

/// Rasterizes the ellipse sum with 4x4 supersampling per pixel.
///
/// Fails if any pixel of the summed image is negative.
pub fn make_phantom(spec: &PhantomSpec, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(RedError::InvalidArgument(format!(
            "phantom size must be positive, got {width}x{height}"
        )));
    }
    for (k, e) in spec.ellipses.iter().enumerate() {
        if !(e.semi_x > 0.0 && e.semi_y > 0.0) || !e.intensity.is_finite() {
            return Err(RedError::InvalidArgument(format!(
                "ellipse {k} has non-positive semi-axes or non-finite intensity"
            )));
        }
    }
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut pixels = vec![0.0f32; width * height];
    for row in 0..height {
        for col in 0..width {
            let mut acc = 0.0f64;
            for e in &spec.ellipses {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    let y = fov_coord(row, sy, height);
                    for sx in 0..SUPERSAMPLE {
                        let x = fov_coord(col, sx, width);
                        if e.contains(x, y) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    acc += e.intensity * hits as f64 * inv;
                }
            }
            if acc < -1e-12 {
                return Err(RedError::InvalidArgument(format!(
                    "phantom is negative ({acc:.4}) at pixel ({row}, {col})"
                )));
            }
            pixels[row * width + col] = acc.max(0.0) as f32;
        }
    }
    Ok(Image {
        width,
        height,
        pixels,
    })
}

#[inline]
fn fov_coord(pixel: usize, sub: usize, n: usize) -> f64 {
    let pos = pixel as f64 + (sub as f64 + 0.5) / SUPERSAMPLE as f64;
    2.0 * pos / n as f64 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_spec_is_zero() {
        let img = make_phantom(&PhantomSpec::default(), 16, 12).unwrap();
        assert!(img.pixels.iter().all(|&v| v == 0.0));
        assert_eq!(img.shape(), (12, 16));
    }

    #[test]
    fn centered_disk_matches_analytic_area() {
        let spec = PhantomSpec {
            ellipses: vec![Ellipse::disk(0.0, 0.0, 0.25, 1.0)],
        };
        let img = make_phantom(&spec, 64, 64).unwrap();
        // radius 0.25 of the half-width 32 px -> 8 px
        let analytic = std::f64::consts::PI * 8.0 * 8.0;
        let rel = (img.sum() - analytic).abs() / analytic;
        assert!(rel < 0.02, "area rel err {rel}");
    }

    #[test]
    fn disjoint_disks_add_exactly() {
        let a = Ellipse::disk(-0.5, 0.0, 0.2, 1.0);
        let b = Ellipse::disk(0.5, 0.1, 0.2, 2.5);
        let both = make_phantom(&PhantomSpec { ellipses: vec![a, b] }, 48, 48).unwrap();
        let ia = make_phantom(&PhantomSpec { ellipses: vec![a] }, 48, 48).unwrap();
        let ib = make_phantom(&PhantomSpec { ellipses: vec![b] }, 48, 48).unwrap();
        for i in 0..both.pixels.len() {
            assert_eq!(both.pixels[i], ia.pixels[i] + ib.pixels[i]);
        }
    }

    #[test]
    fn negative_sum_is_rejected() {
        let spec = PhantomSpec {
            ellipses: vec![Ellipse::disk(0.0, 0.0, 0.3, -1.0)],
        };
        assert!(make_phantom(&spec, 16, 16).is_err());
    }

    #[test]
    fn random_family_is_nonnegative_and_deterministic() {
        for seed in 0..20 {
            let s1 = PhantomSpec::random(&mut ChaCha8Rng::seed_from_u64(seed));
            let s2 = PhantomSpec::random(&mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(s1, s2);
            let img = make_phantom(&s1, 32, 32).unwrap();
            assert!(img.pixels.iter().all(|&v| v >= 0.0));
            assert!(img.sum() > 0.0);
        }
    }
}
