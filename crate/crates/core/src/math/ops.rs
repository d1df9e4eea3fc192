//! Forward and backward kernels behind the graph nodes.

use crate::error::{shape_err, Error, Result};
use crate::math::{axpy, dot, gemm, sigmoid, Real, Tensor, View};

/// Variance floor of [`channel_norm`].
pub const CHANNEL_NORM_EPS: f64 = 1e-8;

/// Output length of a valid (unpadded) strided convolution.
pub fn conv1d_output_len(time: usize, width: usize, stride: usize) -> Result<usize> {
    if stride == 0 || width == 0 {
        return Err(Error::Invalid("conv stride and width must be positive".into()));
    }
    if time < width {
        return Err(Error::TooShort(format!("time {time} < kernel width {width}")));
    }
    Ok((time - width) / stride + 1)
}

pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub width: usize,
    pub time: usize,
    pub tout: usize,
    pub stride: usize,
}

pub(crate) fn conv_geom<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<ConvGeom> {
    let (cin, time) = input.dims2()?;
    let (cout, kin, width) = match kernel.shape() {
        &[o, i, w] => (o, i, w),
        s => return Err(shape_err(format!("kernel must be out x in x width, got {s:?}"))),
    };
    if kin != cin {
        return Err(shape_err(format!("kernel expects {kin} input channels, input has {cin}")));
    }
    let tout = conv1d_output_len(time, width, stride)?;
    Ok(ConvGeom { cin, cout, width, time, tout, stride })
}

/// Channel-major `[cin, time]` to time-major `[time, cin]`.
fn time_major<T: Real>(x: &[T], cin: usize, time: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cin * time];
    for c in 0..cin {
        for t in 0..time {
            out[t * cin + c] = x[c * time + t];
        }
    }
    out
}

/// `[cout, cin, width]` to `[cout, width, cin]` so one output is a contiguous dot.
fn kernel_window_major<T: Real>(k: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); k.len()];
    for o in 0..g.cout {
        for c in 0..g.cin {
            for w in 0..g.width {
                out[(o * g.width + w) * g.cin + c] = k[(o * g.cin + c) * g.width + w];
            }
        }
    }
    out
}

pub(crate) fn conv1d_forward<T: Real>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let xt = time_major(x, g.cin, g.time);
    let kr = kernel_window_major(k, g);
    let span = g.width * g.cin;
    let mut out = vec![T::zero(); g.cout * g.tout];
    // window j is the contiguous slice starting at j * stride * cin
    let windows = View { data: &xt[..], rs: 1, cs: g.stride * g.cin };
    gemm(g.cout, span, g.tout, View::rows(&kr, span), windows, T::zero(), &mut out);
    out
}

/// Returns `(d_input, d_kernel)`; `d_input` is skipped when not needed.
pub(crate) fn conv1d_backward<T: Real>(
    x: &[T],
    k: &[T],
    g: &ConvGeom,
    grad: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let xt = time_major(x, g.cin, g.time);
    let kr = kernel_window_major(k, g);
    let span = g.width * g.cin;
    let hop = g.stride * g.cin;
    let mut dkr = vec![T::zero(); kr.len()];
    let windows = View { data: &xt[..], rs: hop, cs: 1 };
    gemm(g.cout, g.tout, span, View::rows(grad, g.tout), windows, T::zero(), &mut dkr);
    let mut dxt = Vec::new();
    if need_input {
        let mut dwin = vec![T::zero(); g.tout * span];
        gemm(g.tout, g.cout, span, View::cols(grad, g.tout), View::rows(&kr, span), T::zero(), &mut dwin);
        dxt = vec![T::zero(); xt.len()];
        for (j, w) in dwin.chunks_exact(span).enumerate() {
            axpy(T::one(), w, &mut dxt[j * hop..j * hop + span]);
        }
    }
    let mut dk = vec![T::zero(); k.len()];
    for o in 0..g.cout {
        for c in 0..g.cin {
            for w in 0..g.width {
                dk[(o * g.cin + c) * g.width + w] = dkr[(o * g.width + w) * g.cin + c];
            }
        }
    }
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        for c in 0..g.cin {
            for t in 0..g.time {
                dx[c * g.time + t] = dxt[t * g.cin + c];
            }
        }
        dx
    });
    (dx, dk)
}

/// Valid strided 1-D convolution of a `channels x time` input with an
/// `out x in x width` kernel.
pub fn conv1d_strided<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let g = conv_geom(input, kernel, stride)?;
    let out = conv1d_forward(input.data(), kernel.data(), &g);
    Tensor::new(vec![g.cout, g.tout], out)
}

pub(crate) struct NormCache<T> {
    /// Normalized input, `[channels, time]`.
    pub xhat: Vec<T>,
    /// `1 / sqrt(var + eps)` per time step.
    pub inv_std: Vec<T>,
}

pub(crate) fn channel_norm_forward<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    channels: usize,
    time: usize,
) -> (Vec<T>, NormCache<T>) {
    let eps = T::lit(CHANNEL_NORM_EPS);
    let cf = T::from_usize(channels).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); time];
    let mut out = vec![T::zero(); x.len()];
    for t in 0..time {
        let mut mean = T::zero();
        for c in 0..channels {
            mean = mean + x[c * time + t];
        }
        mean = mean / cf;
        let mut var = T::zero();
        for c in 0..channels {
            let d = x[c * time + t] - mean;
            var = var + d * d;
        }
        var = var / cf;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[t] = inv;
        for c in 0..channels {
            let i = c * time + t;
            let h = (x[i] - mean) * inv;
            xhat[i] = h;
            out[i] = gain[c] * h + bias[c];
        }
    }
    (out, NormCache { xhat, inv_std })
}

/// Returns `(d_input, d_gain, d_bias)`.
pub(crate) fn channel_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gain: &[T],
    grad: &[T],
    channels: usize,
    time: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cf = T::from_usize(channels).unwrap();
    let mut dx = vec![T::zero(); grad.len()];
    let mut dg = vec![T::zero(); channels];
    let mut db = vec![T::zero(); channels];
    for c in 0..channels {
        let row = c * time..(c + 1) * time;
        for (&gy, &h) in grad[row.clone()].iter().zip(&cache.xhat[row]) {
            dg[c] = dg[c] + gy * h;
            db[c] = db[c] + gy;
        }
    }
    for t in 0..time {
        let mut mean_d = T::zero();
        let mut mean_dh = T::zero();
        for (c, &g) in gain.iter().enumerate() {
            let i = c * time + t;
            let d = grad[i] * g;
            mean_d = mean_d + d;
            mean_dh = mean_dh + d * cache.xhat[i];
        }
        mean_d = mean_d / cf;
        mean_dh = mean_dh / cf;
        let inv = cache.inv_std[t];
        for (c, &g) in gain.iter().enumerate() {
            let i = c * time + t;
            let d = grad[i] * g;
            dx[i] = inv * (d - mean_d - cache.xhat[i] * mean_dh);
        }
    }
    (dx, dg, db)
}

/// Per time step, normalizes the channel vector to zero mean and unit
/// (population) variance, then applies a per-channel affine map.
pub fn channel_norm<T: Real>(input: &Tensor<T>, gain: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let (c, t) = input.dims2()?;
    if c < 2 {
        return Err(Error::Invalid("channel_norm needs at least two channels".into()));
    }
    if gain.len() != c || bias.len() != c {
        return Err(shape_err(format!("gain/bias length must be {c}")));
    }
    let (out, _) = channel_norm_forward(input.data(), gain, bias, c, t);
    Tensor::new(vec![c, t], out)
}

/// `y[i] = W x[i] + b` for each row of `x: [n, din]`, with `W: [dout, din]`.
pub(crate) fn linear_forward<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, din: usize, dout: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(&b[..dout]);
    }
    gemm(n, din, dout, View::rows(x, din), View::cols(w, din), T::one(), &mut out);
    out
}

pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad: &[T],
    n: usize,
    din: usize,
    dout: usize,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut db = vec![T::zero(); dout];
    for row in grad.chunks_exact(dout) {
        axpy(T::one(), row, &mut db);
    }
    let mut dw = vec![T::zero(); dout * din];
    gemm(dout, n, din, View::cols(grad, dout), View::rows(x, din), T::zero(), &mut dw);
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); n * din];
        gemm(n, dout, din, View::rows(grad, dout), View::rows(w, din), T::zero(), &mut dx);
        dx
    });
    (dx, dw, db)
}

/// Cached activations of a gated recurrent unit run.
pub(crate) struct GruCache<T> {
    /// Reset gate, `[time, hidden]`.
    pub r: Vec<T>,
    /// Update gate.
    pub u: Vec<T>,
    /// Candidate state.
    pub n: Vec<T>,
}

/// Gated recurrent unit over `x: [time, din]` from a zero initial state.
///
/// Weight layout: `w_in: [3h, din]`, `w_h: [3h, h]`, `bias: [3h]`, with gate
/// blocks ordered reset, update, candidate.
///
/// ```text
/// r = σ(Wr x + Ur h + br)
/// u = σ(Wu x + Uu h + bu)
/// n = tanh(Wn x + Un (r ⊙ h) + bn)
/// h' = (1 - u) ⊙ n + u ⊙ h
/// ```
pub(crate) fn gru_forward<T: Real>(
    x: &[T],
    w_in: &[T],
    w_h: &[T],
    bias: &[T],
    time: usize,
    din: usize,
    hidden: usize,
) -> (Vec<T>, GruCache<T>) {
    let h3 = 3 * hidden;
    let pre = linear_forward(x, w_in, bias, time, din, h3);
    let mut out = vec![T::zero(); time * hidden];
    let mut r = vec![T::zero(); time * hidden];
    let mut u = vec![T::zero(); time * hidden];
    let mut n = vec![T::zero(); time * hidden];
    let mut h_prev = vec![T::zero(); hidden];
    let mut rh = vec![T::zero(); hidden];
    for t in 0..time {
        let p = &pre[t * h3..(t + 1) * h3];
        let row = t * hidden..(t + 1) * hidden;
        for j in 0..hidden {
            let rj = sigmoid(p[j] + dot(&w_h[j * hidden..(j + 1) * hidden], &h_prev));
            let uj = sigmoid(p[hidden + j] + dot(&w_h[(hidden + j) * hidden..(hidden + j + 1) * hidden], &h_prev));
            r[t * hidden + j] = rj;
            u[t * hidden + j] = uj;
            rh[j] = rj * h_prev[j];
        }
        for j in 0..hidden {
            let k = 2 * hidden + j;
            let nj = (p[k] + dot(&w_h[k * hidden..(k + 1) * hidden], &rh)).tanh();
            n[t * hidden + j] = nj;
            let uj = u[t * hidden + j];
            out[t * hidden + j] = (T::one() - uj) * nj + uj * h_prev[j];
        }
        h_prev.copy_from_slice(&out[row]);
    }
    (out, GruCache { r, u, n })
}

pub(crate) struct GruGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw_in: Vec<T>,
    pub dw_h: Vec<T>,
    pub dbias: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gru_backward<T: Real>(
    x: &[T],
    w_in: &[T],
    w_h: &[T],
    out: &[T],
    cache: &GruCache<T>,
    grad: &[T],
    time: usize,
    din: usize,
    hidden: usize,
    need_input: bool,
) -> GruGrads<T> {
    let h3 = 3 * hidden;
    let mut dpre = vec![T::zero(); time * h3];
    let mut dw_h = vec![T::zero(); h3 * hidden];
    let mut dh_next = vec![T::zero(); hidden];
    let zeros = vec![T::zero(); hidden];
    let mut dh = vec![T::zero(); hidden];
    let mut dh_prev = vec![T::zero(); hidden];
    let mut drh = vec![T::zero(); hidden];
    // r ⊙ h_prev per step, the input of the candidate's recurrent weights
    let mut rh_all = vec![T::zero(); time * hidden];
    for t in (0..time).rev() {
        let h_prev: &[T] = if t == 0 { &zeros } else { &out[(t - 1) * hidden..t * hidden] };
        let base = t * hidden;
        for j in 0..hidden {
            dh[j] = grad[base + j] + dh_next[j];
            rh_all[base + j] = cache.r[base + j] * h_prev[j];
        }
        drh.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..hidden {
            let (uj, nj) = (cache.u[base + j], cache.n[base + j]);
            dh_prev[j] = dh[j] * uj;
            let dn_pre = dh[j] * (T::one() - uj) * (T::one() - nj * nj);
            let du_pre = dh[j] * (h_prev[j] - nj) * uj * (T::one() - uj);
            dpre[t * h3 + 2 * hidden + j] = dn_pre;
            dpre[t * h3 + hidden + j] = du_pre;
            let k = 2 * hidden + j;
            axpy(dn_pre, &w_h[k * hidden..(k + 1) * hidden], &mut drh);
        }
        for j in 0..hidden {
            let rj = cache.r[base + j];
            dh_prev[j] = dh_prev[j] + drh[j] * rj;
            dpre[t * h3 + j] = drh[j] * h_prev[j] * rj * (T::one() - rj);
        }
        for j in 0..2 * hidden {
            let g = dpre[t * h3 + j];
            if g == T::zero() {
                continue;
            }
            axpy(g, &w_h[j * hidden..(j + 1) * hidden], &mut dh_prev);
        }
        dh_next.copy_from_slice(&dh_prev);
    }
    // reset/update rows pair step t with h[t-1]; step 0 sees the zero state
    if time > 1 {
        let dgates = View { data: &dpre[h3..], rs: 1, cs: h3 };
        gemm(2 * hidden, time - 1, hidden, dgates, View::rows(out, hidden), T::zero(), &mut dw_h[..2 * hidden * hidden]);
    }
    let dcand = View { data: &dpre[2 * hidden..], rs: 1, cs: h3 };
    gemm(hidden, time, hidden, dcand, View::rows(&rh_all, hidden), T::zero(), &mut dw_h[2 * hidden * hidden..]);
    let (dx, dw_in, dbias) = linear_backward(x, w_in, &dpre, time, din, h3, need_input);
    GruGrads { dx, dw_in, dw_h, dbias }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_length_formula() {
        assert_eq!(conv1d_output_len(20, 4, 2).unwrap(), 9);
        assert_eq!(conv1d_output_len(4, 4, 3).unwrap(), 1);
        assert!(matches!(conv1d_output_len(3, 4, 1), Err(Error::TooShort(_))));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::new(vec![2, 5], (0..10).map(f64::from).collect()).unwrap();
        let k = Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conv1d_strided(&x, &k, 1).unwrap(), x);
    }

    #[test]
    fn strided_conv_matches_direct_loop() {
        let x = Tensor::new(vec![2, 20], (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect()).unwrap();
        let k = Tensor::new(vec![3, 2, 4], (0..24).map(|i| ((i * 5) % 7) as f64 - 3.0).collect()).unwrap();
        let y = conv1d_strided(&x, &k, 2).unwrap();
        assert_eq!(y.shape(), &[3, 9]);
        for o in 0..3 {
            for j in 0..9 {
                let mut s = 0.0;
                for c in 0..2 {
                    for w in 0..4 {
                        s += k.data()[(o * 2 + c) * 4 + w] * x.at(c, j * 2 + w);
                    }
                }
                assert_eq!(y.at(o, j), s);
            }
        }
    }

    #[test]
    fn too_short_input_is_error() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let k = Tensor::<f64>::zeros(&[1, 1, 4]);
        assert!(matches!(conv1d_strided(&x, &k, 1), Err(Error::TooShort(_))));
    }

    #[test]
    fn constant_channels_give_bias() {
        let x = Tensor::new(vec![3, 2], vec![2.0f64, -1.0, 2.0, -1.0, 2.0, -1.0]).unwrap();
        let y = channel_norm(&x, &[1.5, 2.0, 0.3], &[0.1, -0.2, 0.7]).unwrap();
        for t in 0..2 {
            assert_eq!(y.at(0, t), 0.1);
            assert_eq!(y.at(1, t), -0.2);
            assert_eq!(y.at(2, t), 0.7);
        }
    }

    #[test]
    fn standardized_input_is_fixed_point() {
        // columns already zero-mean, unit population variance
        let x = Tensor::new(vec![2, 2], vec![1.0f64, -1.0, -1.0, 1.0]).unwrap();
        let y = channel_norm(&x, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn single_channel_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 4]);
        assert!(channel_norm(&x, &[1.0], &[0.0]).is_err());
    }
}
