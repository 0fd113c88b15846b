use super::{Activation, EstimatorParams, Real};
use crate::diffusion::{Predictor, ResidualField};
use crate::error::{check_shape, RedError, Result};
use crate::schedule::ResidualSchedule;
use crate::tomo::Sinogram;

/// `alpha` is stretched to this range before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal features `[sin(tau * f_j), cos(tau * f_j)]` of `tau = 1000 * alpha`
/// with geometrically spaced frequencies `f_j = 10000^(-j / half)`.
pub fn time_embedding(alpha: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let tau = TIME_SCALE * alpha;
    let mut e = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * j as f64 / half as f64).exp();
        e[j] = (tau * freq).sin();
        e[half + j] = (tau * freq).cos();
    }
    e
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Geometry of one feature plane. Activations live in zero-padded planes of
/// `hp x wp`; convolution outputs use a "wide" layout with row stride `wp`
/// whose last `2 * pad` columns of each row are scratch.
struct Dims {
    rows: usize,
    cols: usize,
    pad: usize,
    k: usize,
}

impl Dims {
    fn wp(&self) -> usize {
        self.cols + 2 * self.pad
    }
    fn padded_plane(&self) -> usize {
        (self.rows + 2 * self.pad) * self.wp()
    }
    /// Span of a wide output plane that covers every valid pixel.
    fn span(&self) -> usize {
        (self.rows - 1) * self.wp() + self.cols
    }
    fn offset(&self, ky: usize, kx: usize) -> usize {
        ky * self.wp() + kx
    }
    /// Wide index of output pixel `(y, x)`; the same pixel sits at
    /// `wide + offset(pad, pad)` in a padded plane.
    fn wide(&self, y: usize, x: usize) -> usize {
        y * self.wp() + x
    }
}

/// Same-padded cross-correlation from padded input planes into wide output
/// planes, as one GEMM per kernel tap.
fn conv_forward<T: Real>(
    input: &[T],
    cin: usize,
    cout: usize,
    weights: &[T],
    bias: &[T],
    d: &Dims,
) -> Vec<T> {
    let (k, pplane, span) = (d.k, d.padded_plane(), d.span());
    let kk = k * k;
    let mut out = vec![T::zero(); cout * pplane];
    for (o, plane) in out.chunks_exact_mut(pplane).enumerate() {
        plane[..span].iter_mut().for_each(|v| *v = bias[o]);
    }
    for ky in 0..k {
        for kx in 0..k {
            let tap = ky * k + kx;
            T::gemm(
                cout,
                cin,
                span,
                &weights[tap..],
                ((cin * kk) as isize, kk as isize),
                &input[d.offset(ky, kx)..],
                (pplane as isize, 1),
                T::one(),
                &mut out,
                (pplane as isize, 1),
            );
        }
    }
    out
}

/// Intermediate values kept from a forward pass for the backward pass.
pub struct ForwardCache<T: Real> {
    rows: usize,
    cols: usize,
    /// Padded input planes of every layer.
    inputs: Vec<Vec<T>>,
    /// Activation derivative at each hidden pre-activation, wide layout.
    act_grad: Vec<Vec<T>>,
    embedding: Vec<T>,
}

fn dims(arch: &super::NetArch, rows: usize, cols: usize) -> Dims {
    Dims {
        rows,
        cols,
        pad: arch.kernel / 2,
        k: arch.kernel,
    }
}

pub(crate) fn forward_cached<T: Real>(
    params: &EstimatorParams<T>,
    x: &[T],
    shape: (usize, usize),
    alpha: f64,
) -> Result<(Vec<T>, ForwardCache<T>)> {
    let arch = &params.arch;
    let (rows, cols) = shape;
    if rows == 0 || cols == 0 {
        return Err(RedError::InvalidArgument("empty network input".into()));
    }
    check_shape((rows * cols, 1), (x.len(), 1))?;
    if params.values.len() != arch.param_count() {
        return Err(RedError::ArchMismatch(format!(
            "{} parameters for an architecture expecting {}",
            params.values.len(),
            arch.param_count()
        )));
    }
    let d = dims(arch, rows, cols);
    let (pplane, shift) = (d.padded_plane(), d.offset(d.pad, d.pad));
    let segs = arch.segments();
    let n_layers = arch.n_layers();
    let embedding: Vec<T> = time_embedding(alpha, arch.time_dim)
        .into_iter()
        .map(T::of)
        .collect();
    let tw = &params.values[segs[2 * n_layers].range()];
    let tb = &params.values[segs[2 * n_layers + 1].range()];
    let c1 = arch.widths[1];
    let time_vec: Vec<T> = (0..c1)
        .map(|c| {
            let row = &tw[c * arch.time_dim..(c + 1) * arch.time_dim];
            tb[c] + row.iter().zip(&embedding).map(|(&w, &e)| w * e).sum::<T>()
        })
        .collect();

    let mut first = vec![T::zero(); pplane];
    for y in 0..rows {
        let o = d.wide(y, 0) + shift;
        first[o..o + cols].copy_from_slice(&x[y * cols..(y + 1) * cols]);
    }
    let mut inputs = vec![first];
    let mut act_grad = Vec::with_capacity(n_layers - 1);
    for l in 0..n_layers {
        let (cin, cout) = (arch.widths[l], arch.widths[l + 1]);
        let w = &params.values[segs[2 * l].range()];
        let b = &params.values[segs[2 * l + 1].range()];
        let mut z = conv_forward(&inputs[l], cin, cout, w, b, &d);
        if l == 0 {
            for (c, plane) in z.chunks_exact_mut(pplane).enumerate() {
                let tv = time_vec[c];
                plane[..d.span()].iter_mut().for_each(|v| *v += tv);
            }
        }
        if l + 1 == n_layers {
            let mut out = Vec::with_capacity(rows * cols);
            for y in 0..rows {
                out.extend_from_slice(&z[d.wide(y, 0)..d.wide(y, cols)]);
            }
            return Ok((
                out,
                ForwardCache {
                    rows,
                    cols,
                    inputs,
                    act_grad,
                    embedding,
                },
            ));
        }
        let mut next = vec![T::zero(); cout * pplane];
        let mut grad = vec![T::zero(); cout * pplane];
        for c in 0..cout {
            for y in 0..rows {
                for x in 0..cols {
                    let i = c * pplane + d.wide(y, x);
                    let zv = z[i];
                    let (a, g) = match arch.activation {
                        Activation::Silu => {
                            let s = sigmoid(zv);
                            (zv * s, s * (T::one() + zv * (T::one() - s)))
                        }
                        Activation::Identity => (zv, T::one()),
                    };
                    next[i + shift] = a;
                    grad[i] = g;
                }
            }
        }
        inputs.push(next);
        act_grad.push(grad);
    }
    unreachable!("network has at least one layer")
}

/// Gradient of `<upstream, output>` with respect to every parameter.
pub(crate) fn backward_cached<T: Real>(
    params: &EstimatorParams<T>,
    cache: &ForwardCache<T>,
    upstream: &[T],
) -> Result<Vec<T>> {
    let arch = &params.arch;
    let (rows, cols) = (cache.rows, cache.cols);
    check_shape((rows * cols, 1), (upstream.len(), 1))?;
    let d = dims(arch, rows, cols);
    let (k, pplane, span, shift) = (d.k, d.padded_plane(), d.span(), d.offset(d.pad, d.pad));
    let kk = k * k;
    let segs = arch.segments();
    let n_layers = arch.n_layers();
    let mut grads = vec![T::zero(); params.values.len()];
    // Gradient with respect to the current layer's output, wide layout with
    // zeroed scratch columns.
    let mut g_z = vec![T::zero(); pplane];
    for y in 0..rows {
        g_z[d.wide(y, 0)..d.wide(y, cols)].copy_from_slice(&upstream[y * cols..(y + 1) * cols]);
    }

    for l in (0..n_layers).rev() {
        let (cin, cout) = (arch.widths[l], arch.widths[l + 1]);
        let input = &cache.inputs[l];
        let wseg = segs[2 * l].range();
        let bseg = segs[2 * l + 1].range();

        for ky in 0..k {
            for kx in 0..k {
                let tap = ky * k + kx;
                T::gemm(
                    cout,
                    span,
                    cin,
                    &g_z,
                    (pplane as isize, 1),
                    &input[d.offset(ky, kx)..],
                    (1, pplane as isize),
                    T::zero(),
                    &mut grads[wseg.start + tap..wseg.end],
                    ((cin * kk) as isize, kk as isize),
                );
            }
        }
        let channel_sums: Vec<T> = g_z
            .chunks_exact(pplane)
            .map(|p| p[..span].iter().copied().sum())
            .collect();
        grads[bseg].copy_from_slice(&channel_sums);

        if l == 0 {
            let tw = segs[2 * n_layers].range();
            let tb = segs[2 * n_layers + 1].range();
            let td = arch.time_dim;
            for (c, &s) in channel_sums.iter().enumerate() {
                for (j, &e) in cache.embedding.iter().enumerate() {
                    grads[tw.start + c * td + j] = s * e;
                }
                grads[tb.start + c] = s;
            }
            break;
        }

        // Gradient with respect to the padded input planes of this layer.
        let weights = &params.values[wseg];
        let mut g_in = vec![T::zero(); cin * pplane];
        for ky in 0..k {
            for kx in 0..k {
                let tap = ky * k + kx;
                let off = d.offset(ky, kx);
                T::gemm(
                    cin,
                    cout,
                    span,
                    &weights[tap..],
                    (kk as isize, (cin * kk) as isize),
                    &g_z,
                    (pplane as isize, 1),
                    T::one(),
                    &mut g_in[off..],
                    (pplane as isize, 1),
                );
            }
        }
        // Back through the activation into the previous wide output.
        let act = &cache.act_grad[l - 1];
        let mut next = vec![T::zero(); cin * pplane];
        for c in 0..cin {
            for y in 0..rows {
                for x in 0..cols {
                    let i = c * pplane + d.wide(y, x);
                    next[i] = g_in[i + shift] * act[i];
                }
            }
        }
        g_z = next;
    }
    Ok(grads)
}

/// Network output for input `x` (row-major, `shape = (rows, cols)`) at a given
/// residual proportion `alpha`.
pub fn net_forward_raw<T: Real>(
    params: &EstimatorParams<T>,
    x: &[T],
    shape: (usize, usize),
    alpha: f64,
) -> Result<Vec<T>> {
    forward_cached(params, x, shape, alpha).map(|(out, _)| out)
}

pub fn net_forward<T: Real>(
    params: &EstimatorParams<T>,
    x: &[T],
    shape: (usize, usize),
    t: f64,
    sched: &ResidualSchedule,
) -> Result<Vec<T>> {
    sched.check_time(t)?;
    net_forward_raw(params, x, shape, sched.alpha(t))
}

/// Exact parameter gradient of `<upstream, net_forward(x, t)>`.
pub fn net_backward<T: Real>(
    params: &EstimatorParams<T>,
    x: &[T],
    shape: (usize, usize),
    t: f64,
    sched: &ResidualSchedule,
    upstream: &[T],
) -> Result<Vec<T>> {
    sched.check_time(t)?;
    let (_, cache) = forward_cached(params, x, shape, sched.alpha(t))?;
    backward_cached(params, &cache, upstream)
}

/// Forward pass, loss evaluation on the output, and backward pass in one go.
/// `loss` returns the scalar loss and its gradient with respect to the output.
pub fn forward_backward<T, L>(
    params: &EstimatorParams<T>,
    x: &[T],
    shape: (usize, usize),
    alpha: f64,
    loss: L,
) -> Result<(f64, Vec<T>)>
where
    T: Real,
    L: FnOnce(&[T]) -> Result<(f64, Vec<T>)>,
{
    let (out, cache) = forward_cached(params, x, shape, alpha)?;
    let (value, upstream) = loss(&out)?;
    let grads = backward_cached(params, &cache, &upstream)?;
    Ok((value, grads))
}

/// A trained estimator bound to the schedule whose `alpha(t)` it embeds.
#[derive(Debug, Clone)]
pub struct NetPredictor {
    pub params: EstimatorParams<f32>,
    pub sched: ResidualSchedule,
}

impl Predictor for NetPredictor {
    fn predict(&self, x: &Sinogram, t: f64) -> Result<ResidualField> {
        let out = net_forward(&self.params, &x.values, x.shape(), t, &self.sched)?;
        Ok(ResidualField {
            n_angles: x.n_angles,
            n_bins: x.n_bins,
            values: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{net_init, NetArch};
    use crate::schedule::ScheduleKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sched() -> ResidualSchedule {
        ResidualSchedule::new(500, ScheduleKind::Linear, 1.0).unwrap()
    }

    fn small_arch() -> NetArch {
        NetArch {
            widths: vec![1, 3, 4, 1],
            kernel: 3,
            time_dim: 4,
            activation: Activation::Silu,
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_params_zero_output() {
        let p = EstimatorParams::<f32>::zeros(NetArch::default()).unwrap();
        let out = net_forward(&p, &vec![0.0; 12 * 9], (12, 9), 100.0, &sched()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        let p = net_init(&NetArch::default(), 1).unwrap();
        for (r, c) in [(1, 1), (5, 7), (16, 16), (33, 20)] {
            let out = net_forward(&p, &vec![0.3; r * c], (r, c), 10.0, &sched()).unwrap();
            assert_eq!(out.len(), r * c);
            assert!(out.iter().all(|v| v.is_finite()));
        }
        assert!(net_forward(&p, &[0.0; 5], (2, 3), 0.0, &sched()).is_err());
    }

    #[test]
    fn time_conditioning_is_live() {
        let p = net_init(&NetArch::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f32> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = net_forward(&p, &x, (10, 10), 50.0, &sched()).unwrap();
        let b = net_forward(&p, &x, (10, 10), 450.0, &sched()).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let p = net_init(&small_arch(), 3).unwrap();
        let g = net_backward(&p, &[0.5; 30], (5, 6), 20.0, &sched(), &[0.0; 30]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_matches_correlation_formula() {
        let arch = NetArch {
            widths: vec![1, 1],
            kernel: 3,
            time_dim: 2,
            activation: Activation::Identity,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = EstimatorParams::<f64>::zeros(arch.clone()).unwrap();
        p.values = rand_vec(&mut rng, arch.param_count());
        let (rows, cols) = (4, 5);
        let x = rand_vec(&mut rng, rows * cols);
        let g = rand_vec(&mut rng, rows * cols);
        let grads = net_backward(&p, &x, (rows, cols), 123.0, &sched(), &g).unwrap();
        // dL/dK[ky][kx] = sum_p g[p] * x[p + (ky - 1, kx - 1)] with zero padding
        let px = |r: isize, c: isize| {
            if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                0.0
            } else {
                x[r as usize * cols + c as usize]
            }
        };
        for ky in 0..3 {
            for kx in 0..3 {
                let mut expect = 0.0;
                for r in 0..rows {
                    for c in 0..cols {
                        expect += g[r * cols + c] * px(r as isize + ky as isize - 1, c as isize + kx as isize - 1);
                    }
                }
                assert!((grads[ky * 3 + kx] - expect).abs() < 1e-12);
            }
        }
        let gsum: f64 = g.iter().sum();
        assert!((grads[9] - gsum).abs() < 1e-12);
        let e = time_embedding(sched().alpha(123.0), 2);
        assert!((grads[10] - gsum * e[0]).abs() < 1e-12);
        assert!((grads[11] - gsum * e[1]).abs() < 1e-12);
        assert!((grads[12] - gsum).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = net_init(&arch, 4).unwrap().cast::<f64>();
        let (rows, cols) = (6, 5);
        let x = rand_vec(&mut rng, rows * cols);
        let g = rand_vec(&mut rng, rows * cols);
        let s = sched();
        let grads = net_backward(&p, &x, (rows, cols), 77.0, &s, &g).unwrap();
        let objective = |q: &EstimatorParams<f64>| -> f64 {
            let out = net_forward(q, &x, (rows, cols), 77.0, &s).unwrap();
            out.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for (idx, &an) in grads.iter().enumerate() {
            let mut plus = p.clone();
            plus.values[idx] += h;
            let mut minus = p.clone();
            minus.values[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-4, "param {idx}: fd {fd} vs {an}");
        }
    }
}
