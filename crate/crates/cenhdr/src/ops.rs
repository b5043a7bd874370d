//! Forward compute kernels over NCHW tensors.
//!
//! All kernels are pure: same inputs produce bitwise identical outputs.
//! Reductions accumulate in `f64` before rounding back to the storage type.
//! Parallel kernels assign each output plane to exactly one task and reduce
//! sequentially inside it, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::tensor::{Element, Shape, TensorError, TensorOf};

/// Output extent of a convolution along one axis.
fn conv_out_dim(len: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> i64 {
    let span = dilation as i64 * (k as i64 - 1) + 1;
    let num = len as i64 + 2 * padding as i64 - span;
    if num < 0 {
        -1
    } else {
        num / stride as i64 + 1
    }
}

/// Valid output index range `[lo, hi]` such that `o*stride + off` lands in `[0, len)`.
#[inline]
pub(crate) fn valid_range(out_len: usize, stride: usize, off: i64, len: usize) -> Option<(usize, usize)> {
    // o >= ceil(-off / stride) when off < 0
    let lo = if off < 0 {
        ((-off) as usize).div_ceil(stride)
    } else {
        0
    };
    let hi_num = len as i64 - 1 - off;
    if hi_num < 0 {
        return None;
    }
    let hi = (hi_num as usize / stride).min(out_len.saturating_sub(1));
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

/// 2D cross-correlation with zero padding.
///
/// `input` is `(n, c_in, h, w)`, `weight` is `(c_out, c_in, k, k)` with odd `k`,
/// `bias` is `(1, c_out, 1, 1)`. No kernel flip is applied.
pub fn conv2d<T: Element>(
    input: &TensorOf<T>,
    weight: &TensorOf<T>,
    bias: &TensorOf<T>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<TensorOf<T>, TensorError> {
    let op = "conv2d";
    let is = input.shape();
    let ws = weight.shape();
    if stride < 1 {
        return Err(TensorError::BadParameter { op, param: "stride", min: 1, got: stride });
    }
    if dilation < 1 {
        return Err(TensorError::BadParameter { op, param: "dilation", min: 1, got: dilation });
    }
    if ws.h != ws.w {
        return Err(TensorError::AxisMismatch { op, axis: "kernel width", expected: ws.h, got: ws.w });
    }
    let k = ws.h;
    if k % 2 == 0 {
        return Err(TensorError::EvenKernel { op, k });
    }
    if is.c != ws.c {
        return Err(TensorError::AxisMismatch { op, axis: "input channels", expected: ws.c, got: is.c });
    }
    let bs = bias.shape();
    if bs != Shape::new(1, ws.n, 1, 1) {
        return Err(TensorError::AxisMismatch { op, axis: "bias channels", expected: ws.n, got: bs.c });
    }
    let h_out = conv_out_dim(is.h, k, stride, padding, dilation);
    let w_out = conv_out_dim(is.w, k, stride, padding, dilation);
    if h_out < 1 || w_out < 1 {
        return Err(TensorError::EmptyOutput { op, shape: is });
    }
    let (h_out, w_out) = (h_out as usize, w_out as usize);
    let out_shape = Shape::new(is.n, ws.n, h_out, w_out);

    let c_in = is.c;
    let (ih, iw) = (is.h, is.w);
    let plane_out = h_out * w_out;
    let mut out = vec![T::zero(); out_shape.len()];

    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(plane_idx, out_plane)| {
            let n = plane_idx / ws.n;
            let co = plane_idx % ws.n;
            let mut acc = vec![0.0f64; plane_out];
            for ci in 0..c_in {
                let x = input.plane(n, ci);
                for kh in 0..k {
                    let h_off = (kh * dilation) as i64 - padding as i64;
                    let Some((oh_lo, oh_hi)) = valid_range(h_out, stride, h_off, ih) else {
                        continue;
                    };
                    for kw in 0..k {
                        let w_off = (kw * dilation) as i64 - padding as i64;
                        let Some((ow_lo, ow_hi)) = valid_range(w_out, stride, w_off, iw) else {
                            continue;
                        };
                        let wv = weight.at(co, ci, kh, kw).to_f64();
                        for oh in oh_lo..=oh_hi {
                            let row_i = (oh as i64 * stride as i64 + h_off) as usize;
                            let x_row = &x[row_i * iw..(row_i + 1) * iw];
                            let acc_row = &mut acc[oh * w_out..(oh + 1) * w_out];
                            if stride == 1 {
                                let x_lo = (ow_lo as i64 + w_off) as usize;
                                let span = ow_hi - ow_lo + 1;
                                let xs = &x_row[x_lo..x_lo + span];
                                let accs = &mut acc_row[ow_lo..ow_lo + span];
                                for (a, xv) in accs.iter_mut().zip(xs) {
                                    *a += wv * xv.to_f64();
                                }
                            } else {
                                for ow in ow_lo..=ow_hi {
                                    let col_i = (ow as i64 * stride as i64 + w_off) as usize;
                                    acc[oh * w_out + ow] += wv * x_row[col_i].to_f64();
                                }
                            }
                        }
                    }
                }
            }
            let b = bias.data()[co].to_f64();
            for (o, a) in out_plane.iter_mut().zip(&acc) {
                *o = T::from_f64(a + b);
            }
        });

    TensorOf::new(out_shape, out)
}

/// Channel-to-space rearrangement: `(n, c*r^2, h, w)` becomes `(n, c, h*r, w*r)`.
pub fn pixel_shuffle<T: Element>(input: &TensorOf<T>, r: usize) -> Result<TensorOf<T>, TensorError> {
    let op = "pixel_shuffle";
    if r < 1 {
        return Err(TensorError::BadParameter { op, param: "r", min: 1, got: r });
    }
    let s = input.shape();
    let r2 = r * r;
    if s.c % r2 != 0 {
        return Err(TensorError::NotDivisible { op, axis: "channels", got: s.c, divisor: r2 });
    }
    let out_shape = Shape::new(s.n, s.c / r2, s.h * r, s.w * r);
    let mut out = TensorOf::zeros(out_shape);
    for n in 0..out_shape.n {
        for c in 0..out_shape.c {
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    let src_c = c * r2 + (y % r) * r + (x % r);
                    let v = input.at(n, src_c, y / r, x / r);
                    let i = out.index(n, c, y, x);
                    out.data_mut()[i] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(
    input: &TensorOf<T>,
    r: usize,
) -> Result<TensorOf<T>, TensorError> {
    let op = "pixel_unshuffle";
    if r < 1 {
        return Err(TensorError::BadParameter { op, param: "r", min: 1, got: r });
    }
    let s = input.shape();
    if s.h % r != 0 {
        return Err(TensorError::NotDivisible { op, axis: "height", got: s.h, divisor: r });
    }
    if s.w % r != 0 {
        return Err(TensorError::NotDivisible { op, axis: "width", got: s.w, divisor: r });
    }
    let out_shape = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut out = TensorOf::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let dst_c = c * r * r + (y % r) * r + (x % r);
                    let v = input.at(n, c, y, x);
                    let i = out.index(n, dst_c, y / r, x / r);
                    out.data_mut()[i] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Mean over each `(h, w)` plane, producing `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Element>(input: &TensorOf<T>) -> Result<TensorOf<T>, TensorError> {
    let s = input.shape();
    if s.h * s.w == 0 {
        return Err(TensorError::EmptyInput { op: "global_avg_pool" });
    }
    let hw = (s.h * s.w) as f64;
    let mut out = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let sum: f64 = input.plane(n, c).iter().map(|v| v.to_f64()).sum();
            out.push(T::from_f64(sum / hw));
        }
    }
    TensorOf::new(Shape::new(s.n, s.c, 1, 1), out)
}

/// Affine map on channel vectors: `(n, c_in, 1, 1)` with weight `(c_out, c_in, 1, 1)`
/// and bias `(1, c_out, 1, 1)`.
pub fn linear<T: Element>(
    input: &TensorOf<T>,
    weight: &TensorOf<T>,
    bias: &TensorOf<T>,
) -> Result<TensorOf<T>, TensorError> {
    let op = "linear";
    let is = input.shape();
    let ws = weight.shape();
    if is.h != 1 || is.w != 1 {
        return Err(TensorError::ShapeMismatch { op, left: is, right: Shape::new(is.n, is.c, 1, 1) });
    }
    if ws.h != 1 || ws.w != 1 {
        return Err(TensorError::ShapeMismatch { op, left: ws, right: Shape::new(ws.n, ws.c, 1, 1) });
    }
    if is.c != ws.c {
        return Err(TensorError::AxisMismatch { op, axis: "input channels", expected: ws.c, got: is.c });
    }
    let bs = bias.shape();
    if bs != Shape::new(1, ws.n, 1, 1) {
        return Err(TensorError::AxisMismatch { op, axis: "bias channels", expected: ws.n, got: bs.c });
    }
    let mut out = Vec::with_capacity(is.n * ws.n);
    for n in 0..is.n {
        let x = &input.data()[n * is.c..(n + 1) * is.c];
        for co in 0..ws.n {
            let wr = &weight.data()[co * ws.c..(co + 1) * ws.c];
            let mut acc = bias.data()[co].to_f64();
            for (xv, wv) in x.iter().zip(wr) {
                acc += xv.to_f64() * wv.to_f64();
            }
            out.push(T::from_f64(acc));
        }
    }
    TensorOf::new(Shape::new(is.n, ws.n, 1, 1), out)
}

/// Elementwise max(x, 0).
pub fn relu<T: Element>(input: &TensorOf<T>) -> TensorOf<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function, numerically stable for both signs.
pub fn sigmoid<T: Element>(input: &TensorOf<T>) -> TensorOf<T> {
    input.map(|v| T::from_f64(sigmoid_scalar(v.to_f64())))
}

/// The two broadcast layouts accepted by [`add`] and [`mul`]: the second
/// operand may be a per-channel spatial map `(n, 1, h, w)` replicated across
/// channels, or a channel vector `(n, c, 1, 1)` replicated across space.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum Broadcast {
    Exact,
    SpatialMap,
    ChannelVector,
}

pub(crate) fn classify_broadcast(
    op: &'static str,
    a: Shape,
    b: Shape,
) -> Result<Broadcast, TensorError> {
    if a == b {
        Ok(Broadcast::Exact)
    } else if b == Shape::new(a.n, 1, a.h, a.w) {
        Ok(Broadcast::SpatialMap)
    } else if b == Shape::new(a.n, a.c, 1, 1) {
        Ok(Broadcast::ChannelVector)
    } else {
        Err(TensorError::ShapeMismatch { op, left: a, right: b })
    }
}

fn zip_broadcast<T: Element>(
    op: &'static str,
    a: &TensorOf<T>,
    b: &TensorOf<T>,
    f: impl Fn(T, T) -> T,
) -> Result<TensorOf<T>, TensorError> {
    let sa = a.shape();
    let mode = classify_broadcast(op, sa, b.shape())?;
    let data = match mode {
        Broadcast::Exact => a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
        Broadcast::SpatialMap => {
            let hw = sa.h * sa.w;
            let mut out = Vec::with_capacity(sa.len());
            for n in 0..sa.n {
                let map = b.plane(n, 0);
                for c in 0..sa.c {
                    for (x, y) in a.plane(n, c).iter().zip(map) {
                        out.push(f(*x, *y));
                    }
                }
            }
            debug_assert_eq!(out.len(), sa.n * sa.c * hw);
            out
        }
        Broadcast::ChannelVector => {
            let mut out = Vec::with_capacity(sa.len());
            for n in 0..sa.n {
                for c in 0..sa.c {
                    let y = b.at(n, c, 0, 0);
                    for x in a.plane(n, c) {
                        out.push(f(*x, y));
                    }
                }
            }
            out
        }
    };
    TensorOf::new(sa, data)
}

/// Elementwise sum. `b` may broadcast per [`Broadcast`].
pub fn add<T: Element>(a: &TensorOf<T>, b: &TensorOf<T>) -> Result<TensorOf<T>, TensorError> {
    zip_broadcast("add", a, b, |x, y| x + y)
}

/// Elementwise product. `b` may broadcast per [`Broadcast`].
pub fn mul<T: Element>(a: &TensorOf<T>, b: &TensorOf<T>) -> Result<TensorOf<T>, TensorError> {
    zip_broadcast("mul", a, b, |x, y| x * y)
}

/// Replicates a `(n, 1, h, w)` map across `c` channels.
pub fn expand_channels<T: Element>(
    input: &TensorOf<T>,
    c: usize,
) -> Result<TensorOf<T>, TensorError> {
    let s = input.shape();
    if s.c != 1 {
        return Err(TensorError::AxisMismatch {
            op: "expand_channels",
            axis: "channels",
            expected: 1,
            got: s.c,
        });
    }
    let out_shape = Shape::new(s.n, c, s.h, s.w);
    let hw = s.h * s.w;
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        let map = input.plane(n, 0);
        for _ in 0..c {
            out.extend_from_slice(map);
        }
    }
    debug_assert_eq!(out.len(), s.n * c * hw);
    TensorOf::new(out_shape, out)
}

/// Concatenates tensors along the channel axis; all must share n, h, w.
pub fn concat_channels<T: Element>(tensors: &[&TensorOf<T>]) -> Result<TensorOf<T>, TensorError> {
    let op = "concat_channels";
    let Some(first) = tensors.first() else {
        return Err(TensorError::EmptyInput { op });
    };
    let s0 = first.shape();
    let mut c_total = 0;
    for t in tensors {
        let s = t.shape();
        if s.n != s0.n || s.h != s0.h || s.w != s0.w {
            return Err(TensorError::ShapeMismatch { op, left: s0, right: s });
        }
        c_total += s.c;
    }
    let out_shape = Shape::new(s0.n, c_total, s0.h, s0.w);
    let hw = s0.h * s0.w;
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..s0.n {
        for t in tensors {
            let c = t.shape().c;
            let start = n * c * hw;
            out.extend_from_slice(&t.data()[start..start + c * hw]);
        }
    }
    TensorOf::new(out_shape, out)
}

/// Mean absolute difference over all elements.
pub fn l1_loss<T: Element>(a: &TensorOf<T>, b: &TensorOf<T>) -> Result<T, TensorError> {
    let op = "l1_loss";
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op, left: a.shape(), right: b.shape() });
    }
    if a.shape().is_empty() {
        return Err(TensorError::EmptyInput { op });
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .sum();
    Ok(T::from_f64(sum / a.shape().len() as f64))
}

#[inline]
pub(crate) fn mu_law_scalar(h: f64, mu: f64) -> f64 {
    (1.0 + mu * h).ln() / (1.0 + mu).ln()
}

/// μ-law range compression `T(H) = log(1 + μH) / log(1 + μ)` applied elementwise.
///
/// Inputs must be non-negative; the map is strictly increasing on `[0, 1]`
/// with `T(0) = 0` and `T(1) = 1`.
pub fn mu_law<T: Element>(input: &TensorOf<T>, mu: f64) -> Result<TensorOf<T>, TensorError> {
    if let Some(index) = input.data().iter().position(|v| v.to_f64() < 0.0) {
        return Err(TensorError::NegativeInput {
            op: "mu_law",
            value: input.data()[index].to_f64(),
            index,
        });
    }
    Ok(input.map(|v| T::from_f64(mu_law_scalar(v.to_f64(), mu))))
}

/// Elementwise scale by a constant.
pub fn scale<T: Element>(input: &TensorOf<T>, factor: f64) -> TensorOf<T> {
    input.map(|v| T::from_f64(v.to_f64() * factor))
}
