//! Time-conditioned convolutional residual estimator shared by the residual
//! and drift networks, with hand-written reverse-mode gradients and AdamW.
//!
//! The network is a plain stack of same-padded `k x k` convolutions with SiLU
//! between layers. A sinusoidal embedding of `alpha(t)` is projected to the
//! first layer's channels and added to its pre-activations. Everything is
//! generic over [`Real`] so the same code runs in `f32` for training and in
//! `f64` for gradient checks.

mod adamw;
mod checkpoint;
mod net;

pub use adamw::{adamw_step, OptState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use net::{forward_backward, net_backward, net_forward, net_forward_raw, time_embedding, NetPredictor};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{RedError, Result};

/// Floating point type the estimator runs in.
pub trait Real:
    Float + Debug + Default + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `C = A * B + beta * C` on strided row/column layouts, `A` is `m x k`,
    /// `B` is `k x n`. Strides are `(row, col)` pairs in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        beta: Self,
        c: &mut [Self],
        sc: (isize, isize),
    );
}

macro_rules! real_gemm {
    ($t:ty, $f:path) => {
        #[allow(clippy::too_many_arguments)]
        fn gemm(
            m: usize,
            k: usize,
            n: usize,
            a: &[$t],
            sa: (isize, isize),
            b: &[$t],
            sb: (isize, isize),
            beta: $t,
            c: &mut [$t],
            sc: (isize, isize),
        ) {
            let span = |r: usize, q: usize, s: (isize, isize)| {
                if r == 0 || q == 0 {
                    0
                } else {
                    ((r - 1) as isize * s.0 + (q - 1) as isize * s.1) as usize + 1
                }
            };
            assert!(a.len() >= span(m, k, sa) && b.len() >= span(k, n, sb));
            assert!(c.len() >= span(m, n, sc));
            // SAFETY: the asserts above bound every strided access.
            unsafe {
                $f(
                    m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta,
                    c.as_mut_ptr(), sc.0, sc.1,
                );
            }
        }
    };
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    real_gemm!(f32, matrixmultiply::sgemm);
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    real_gemm!(f64, matrixmultiply::dgemm);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

impl Activation {
    pub(crate) fn code(self) -> u32 {
        match self {
            Self::Silu => 0,
            Self::Identity => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Self::Silu),
            1 => Ok(Self::Identity),
            other => Err(RedError::Format(format!("unknown activation code {other}"))),
        }
    }
}

/// Layer layout. `widths` lists the channel count of every feature map from
/// input to output, so a network has `widths.len() - 1` convolutions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetArch {
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub time_dim: usize,
    pub activation: Activation,
}

impl Default for NetArch {
    fn default() -> Self {
        Self {
            widths: vec![1, 16, 32, 32, 16, 1],
            kernel: 3,
            time_dim: 16,
            activation: Activation::Silu,
        }
    }
}

impl NetArch {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(RedError::InvalidArgument(format!(
                "network needs at least an input and an output map, got widths {:?}",
                self.widths
            )));
        }
        if self.widths[0] != 1 || *self.widths.last().unwrap() != 1 {
            return Err(RedError::InvalidArgument(
                "input and output must be single-channel".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(RedError::InvalidArgument("zero-width layer".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(RedError::InvalidArgument(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(RedError::InvalidArgument(format!(
                "time embedding dimension must be even and positive, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Named parameter segments in storage order.
    pub fn segments(&self) -> Vec<Segment> {
        let k2 = self.kernel * self.kernel;
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize, fan_in: usize| {
            out.push(Segment {
                name,
                offset,
                len,
                fan_in,
            });
            offset += len;
        };
        for l in 0..self.n_layers() {
            let (cin, cout) = (self.widths[l], self.widths[l + 1]);
            push(format!("conv{l}.weight"), cout * cin * k2, cin * k2);
            push(format!("conv{l}.bias"), cout, 0);
        }
        push("time.weight".into(), self.widths[1] * self.time_dim, self.time_dim);
        push("time.bias".into(), self.widths[1], 0);
        out
    }

    pub fn param_count(&self) -> usize {
        self.segments().iter().map(|s| s.len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Zero for bias segments.
    pub fan_in: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter vector laid out per [`NetArch::segments`].
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams<T: Real = f32> {
    pub arch: NetArch,
    pub values: Vec<T>,
}

impl<T: Real> EstimatorParams<T> {
    pub fn zeros(arch: NetArch) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(Self {
            arch,
            values: vec![T::zero(); n],
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[T]> {
        self.arch
            .segments()
            .into_iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    pub fn cast<U: Real>(&self) -> EstimatorParams<U> {
        EstimatorParams {
            arch: self.arch.clone(),
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn check(&self) -> Result<()> {
        self.arch.validate()?;
        if self.values.len() != self.arch.param_count() {
            return Err(RedError::ArchMismatch(format!(
                "{} parameters for an architecture expecting {}",
                self.values.len(),
                self.arch.param_count()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(RedError::NonFinite(format!("parameter {i}")));
        }
        Ok(())
    }
}

/// He-normal kernels (`sd = sqrt(2 / fan_in)`) and zero biases.
pub fn net_init(arch: &NetArch, seed: u64) -> Result<EstimatorParams<f32>> {
    let mut params = EstimatorParams::zeros(arch.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for seg in arch.segments() {
        if seg.fan_in == 0 {
            continue;
        }
        let normal = Normal::new(0.0, (2.0 / seg.fan_in as f64).sqrt()).expect("valid sd");
        for v in &mut params.values[seg.range()] {
            *v = normal.sample(&mut rng) as f32;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_arch_layout() {
        let arch = NetArch::default();
        arch.validate().unwrap();
        let segs = arch.segments();
        assert_eq!(segs.len(), 12);
        assert_eq!(segs[0].len, 16 * 9);
        assert_eq!(segs[2].len, 32 * 16 * 9);
        let expected = (16 * 9 + 16)
            + (32 * 16 * 9 + 32)
            + (32 * 32 * 9 + 32)
            + (16 * 32 * 9 + 16)
            + (16 * 9 + 1)
            + (16 * 16 + 16);
        assert_eq!(arch.param_count(), expected);
    }

    #[test]
    fn invalid_archs_rejected() {
        let bad = |widths: Vec<usize>| NetArch {
            widths,
            ..NetArch::default()
        };
        assert!(bad(vec![1]).validate().is_err());
        assert!(bad(vec![]).validate().is_err());
        assert!(bad(vec![2, 1]).validate().is_err());
        assert!(net_init(&bad(vec![1]), 0).is_err());
        let even = NetArch {
            kernel: 4,
            ..NetArch::default()
        };
        assert!(even.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let arch = NetArch::default();
        assert_eq!(net_init(&arch, 5).unwrap(), net_init(&arch, 5).unwrap());
        assert_ne!(net_init(&arch, 5).unwrap(), net_init(&arch, 6).unwrap());
    }

    #[test]
    fn init_variance_follows_fan_in() {
        let arch = NetArch::default();
        let p = net_init(&arch, 17).unwrap();
        for seg in arch.segments() {
            let vals = &p.values[seg.range()];
            if seg.fan_in == 0 {
                assert!(vals.iter().all(|&v| v == 0.0), "{} not zero", seg.name);
                continue;
            }
            if seg.len < 4000 {
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let expect = 2.0 / seg.fan_in as f64;
            assert!((var / expect - 1.0).abs() < 0.2, "{}: {var} vs {expect}", seg.name);
        }
    }
}
