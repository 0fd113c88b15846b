//! Parallel-beam tomography: phantoms, the projection operator and its
//! adjoint, and the classical reconstructors (FBP, MLEM, OSEM).
//!
//! Images are square-pixel activity maps stored row-major. Sinograms are
//! stored angle-major: row `a` holds the detector bins for view `a`.

mod em;
mod fbp;
mod phantom;
mod projector;

pub use em::{mlem, osem, osem_subsets, poisson_log_likelihood};
pub use fbp::{fbp, ramp_response, FilterKind};
pub use phantom::{make_phantom, Ellipse, PhantomSpec};
pub use projector::{back_project, forward_project};

use crate::dose::ScaleRecord;
use crate::error::{RedError, Result};

/// Nonnegative 2D activity map.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RedError::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(RedError::ShapeMismatch {
                expected: (height, width),
                actual: (pixels.len(), 1),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// `(rows, cols)`
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum()
    }
}

/// Projection-domain data, angle-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub n_angles: usize,
    pub n_bins: usize,
    pub values: Vec<f32>,
    pub scale: Option<ScaleRecord>,
}

impl Sinogram {
    pub fn zeros(n_angles: usize, n_bins: usize) -> Self {
        Self {
            n_angles,
            n_bins,
            values: vec![0.0; n_angles * n_bins],
            scale: None,
        }
    }

    pub fn from_vec(n_angles: usize, n_bins: usize, values: Vec<f32>) -> Result<Self> {
        if n_angles == 0 || n_bins == 0 {
            return Err(RedError::InvalidArgument(format!(
                "sinogram dimensions must be positive, got {n_angles}x{n_bins}"
            )));
        }
        if values.len() != n_angles * n_bins {
            return Err(RedError::ShapeMismatch {
                expected: (n_angles, n_bins),
                actual: (values.len(), 1),
            });
        }
        Ok(Self {
            n_angles,
            n_bins,
            values,
            scale: None,
        })
    }

    /// `(angles, bins)`
    pub fn shape(&self) -> (usize, usize) {
        (self.n_angles, self.n_bins)
    }

    pub fn row(&self, angle: usize) -> &[f32] {
        &self.values[angle * self.n_bins..(angle + 1) * self.n_bins]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub(crate) fn check_nonnegative(&self) -> Result<()> {
        match self.values.iter().position(|&v| !(v >= 0.0)) {
            Some(index) => Err(RedError::NegativeValue {
                index,
                value: self.values[index] as f64,
            }),
            None => Ok(()),
        }
    }
}

/// Parallel-beam acquisition geometry for a square image.
///
/// Pixel centers sit at `i - (side - 1) / 2` in pixel units and detector bin
/// `b` at `(b - (n_bins - 1) / 2) * bin_spacing` along the detector axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGeometry {
    pub n_angles: usize,
    pub n_bins: usize,
    pub angles: Vec<f64>,
    pub bin_spacing: f64,
    pub image_side: usize,
}

impl ProjectionGeometry {
    /// Equally spaced views over `[0, pi)` with unit bin spacing.
    pub fn parallel(image_side: usize, n_angles: usize, n_bins: usize) -> Result<Self> {
        if n_angles == 0 {
            return Err(RedError::InvalidArgument("n_angles must be >= 1".into()));
        }
        let angles = (0..n_angles)
            .map(|a| std::f64::consts::PI * a as f64 / n_angles as f64)
            .collect();
        Self::new(image_side, n_bins, angles, 1.0)
    }

    pub fn new(
        image_side: usize,
        n_bins: usize,
        angles: Vec<f64>,
        bin_spacing: f64,
    ) -> Result<Self> {
        if image_side == 0 || n_bins == 0 || angles.is_empty() {
            return Err(RedError::InvalidArgument(
                "geometry dimensions must be positive".into(),
            ));
        }
        if !(bin_spacing > 0.0) {
            return Err(RedError::InvalidArgument(format!(
                "bin spacing must be positive, got {bin_spacing}"
            )));
        }
        if angles.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(RedError::InvalidArgument(
                "angles must be strictly increasing".into(),
            ));
        }
        if angles
            .iter()
            .any(|&a| !(0.0..std::f64::consts::PI).contains(&a))
        {
            return Err(RedError::InvalidArgument("angles must lie in [0, pi)".into()));
        }
        let diagonal = (image_side as f64) * std::f64::consts::SQRT_2;
        if (n_bins as f64) * bin_spacing < diagonal {
            return Err(RedError::InvalidArgument(format!(
                "{n_bins} bins of pitch {bin_spacing} truncate a {image_side}px image (diagonal {diagonal:.1})"
            )));
        }
        Ok(Self {
            n_angles: angles.len(),
            n_bins,
            angles,
            bin_spacing,
            image_side,
        })
    }

    pub fn sinogram_shape(&self) -> (usize, usize) {
        (self.n_angles, self.n_bins)
    }

    pub(crate) fn check_image(&self, img: &Image) -> Result<()> {
        crate::error::check_shape((self.image_side, self.image_side), img.shape())
    }

    pub(crate) fn check_sinogram(&self, sino: &Sinogram) -> Result<()> {
        crate::error::check_shape(self.sinogram_shape(), sino.shape())
    }
}
