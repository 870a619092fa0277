//! Raw compute kernels behind the tape operations.
//!
//! Shape validation happens in the tape op builders; kernels assume
//! consistent inputs. Hot kernels parallelize over `(n, c)` output planes via
//! [`crate::parallel`]; every plane is written by exactly one worker and all
//! reductions run in a fixed order, so results do not depend on thread count.
//! Inner loops are written over contiguous row slices so they vectorize.

use super::{Scalar, Shape, Tensor};
use crate::parallel;

// ── Convolution ────────────────────────────────────────────────────────────

pub(crate) fn conv2d_out_dims(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return None;
    }
    Some(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
}

/// Row range `[oy0, oy1)` of output positions whose tap `ky` lands inside an
/// input extent of `len` (stride 1).
#[inline]
fn tap_range(out_len: usize, in_len: usize, tap: usize, pad: usize) -> (usize, usize) {
    if tap >= in_len + pad {
        return (0, 0);
    }
    (pad.saturating_sub(tap), out_len.min(in_len + pad - tap))
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let (oc, ic, k) = (w.shape().n, w.shape().c, w.shape().h);
    let (oh, ow) = conv2d_out_dims(xs.h, xs.w, k, stride, pad).expect("validated by caller");
    let mut out = Tensor::zeros(Shape::new(xs.n, oc, oh, ow));
    let wdat = w.data();
    let bias = b.data();

    parallel::for_each_chunk_mut(out.data_mut(), oh * ow, |plane, out_p| {
        let ni = plane / oc;
        let oci = plane % oc;
        out_p.fill(bias[oci]);
        for ici in 0..ic {
            let in_p = x.plane(ni, ici);
            let wbase = (oci * ic + ici) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = wdat[wbase + ky * k + kx];
                    if wgt == T::zero() {
                        continue;
                    }
                    if stride == 1 {
                        let (oy0, oy1) = tap_range(oh, xs.h, ky, pad);
                        let (ox0, ox1) = tap_range(ow, xs.w, kx, pad);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy + ky - pad;
                            let src = &in_p[iy * xs.w + ox0 + kx - pad..][..ox1 - ox0];
                            let dst = &mut out_p[oy * ow + ox0..oy * ow + ox1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = *d + wgt * *s;
                            }
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let row = iy as usize * xs.w;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                out_p[oy * ow + ox] = out_p[oy * ow + ox] + wgt * in_p[row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward_input<T: Scalar>(
    gout: &Tensor<T>,
    w: &Tensor<T>,
    in_shape: Shape,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (oc, ic, k) = (w.shape().n, w.shape().c, w.shape().h);
    let (oh, ow) = (gout.shape().h, gout.shape().w);
    let mut gin = Tensor::zeros(in_shape);
    let wdat = w.data();

    parallel::for_each_chunk_mut(gin.data_mut(), in_shape.h * in_shape.w, |plane, gin_p| {
        let ni = plane / ic;
        let ici = plane % ic;
        for oci in 0..oc {
            let go_p = gout.plane(ni, oci);
            let wbase = (oci * ic + ici) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = wdat[wbase + ky * k + kx];
                    if wgt == T::zero() {
                        continue;
                    }
                    if stride == 1 {
                        let (oy0, oy1) = tap_range(oh, in_shape.h, ky, pad);
                        let (ox0, ox1) = tap_range(ow, in_shape.w, kx, pad);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy + ky - pad;
                            let src = &go_p[oy * ow + ox0..oy * ow + ox1];
                            let dst = &mut gin_p[iy * in_shape.w + ox0 + kx - pad..][..ox1 - ox0];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = *d + wgt * *s;
                            }
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= in_shape.h as isize {
                                continue;
                            }
                            let row = iy as usize * in_shape.w;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= in_shape.w as isize {
                                    continue;
                                }
                                gin_p[row + ix as usize] =
                                    gin_p[row + ix as usize] + wgt * go_p[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

pub(crate) fn conv2d_backward_weight<T: Scalar>(
    x: &Tensor<T>,
    gout: &Tensor<T>,
    w_shape: Shape,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let (ic, k) = (w_shape.c, w_shape.h);
    let (oh, ow) = (gout.shape().h, gout.shape().w);
    let mut gw = Tensor::zeros(w_shape);

    parallel::for_each_chunk_mut(gw.data_mut(), ic * k * k, |oci, gw_c| {
        for ni in 0..xs.n {
            let go_p = gout.plane(ni, oci);
            for ici in 0..ic {
                let in_p = x.plane(ni, ici);
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        if stride == 1 {
                            let (oy0, oy1) = tap_range(oh, xs.h, ky, pad);
                            let (ox0, ox1) = tap_range(ow, xs.w, kx, pad);
                            if ox0 >= ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = oy + ky - pad;
                                let a = &go_p[oy * ow + ox0..oy * ow + ox1];
                                let b = &in_p[iy * xs.w + ox0 + kx - pad..][..ox1 - ox0];
                                for (ga, xb) in a.iter().zip(b) {
                                    acc = acc + *ga * *xb;
                                }
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= xs.h as isize {
                                    continue;
                                }
                                let row = iy as usize * xs.w;
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    acc = acc + go_p[oy * ow + ox] * in_p[row + ix as usize];
                                }
                            }
                        }
                        let slot = ici * k * k + ky * k + kx;
                        gw_c[slot] = gw_c[slot] + acc;
                    }
                }
            }
        }
    });
    gw
}

pub(crate) fn conv2d_backward_bias<T: Scalar>(gout: &Tensor<T>) -> Tensor<T> {
    let gs = gout.shape();
    let mut gb = Tensor::zeros(Shape::new(1, gs.c, 1, 1));
    for ni in 0..gs.n {
        for ci in 0..gs.c {
            let s: T = gout.plane(ni, ci).iter().copied().sum();
            gb.data_mut()[ci] = gb.data_mut()[ci] + s;
        }
    }
    gb
}

// ── Fully connected ────────────────────────────────────────────────────────

/// `x` is treated as `(n, d)` with `d = c*h*w`; `w` is `(out, d, 1, 1)`,
/// bias `(1, out, 1, 1)`, output `(n, out, 1, 1)`.
pub(crate) fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let n = x.shape().n;
    let d = x.shape().numel() / n;
    let out_dim = w.shape().n;
    let mut out = Tensor::zeros(Shape::new(n, out_dim, 1, 1));
    for ni in 0..n {
        let xrow = &x.data()[ni * d..(ni + 1) * d];
        for oi in 0..out_dim {
            let wrow = &w.data()[oi * d..(oi + 1) * d];
            let mut acc = b.data()[oi];
            for (wv, xv) in wrow.iter().zip(xrow) {
                acc = acc + *wv * *xv;
            }
            out.data_mut()[ni * out_dim + oi] = acc;
        }
    }
    out
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = x.shape().n;
    let d = x.shape().numel() / n;
    let out_dim = w.shape().n;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(Shape::new(1, out_dim, 1, 1));
    for ni in 0..n {
        let xrow = &x.data()[ni * d..(ni + 1) * d];
        let grow = &gout.data()[ni * out_dim..(ni + 1) * out_dim];
        for oi in 0..out_dim {
            let g = grow[oi];
            gb.data_mut()[oi] = gb.data_mut()[oi] + g;
            let wrow = &w.data()[oi * d..(oi + 1) * d];
            let gxrow = &mut gx.data_mut()[ni * d..(ni + 1) * d];
            for (gxv, wv) in gxrow.iter_mut().zip(wrow) {
                *gxv = *gxv + g * *wv;
            }
            let gwrow = &mut gw.data_mut()[oi * d..(oi + 1) * d];
            for (gwv, xv) in gwrow.iter_mut().zip(xrow) {
                *gwv = *gwv + g * *xv;
            }
        }
    }
    (gx, gw, gb)
}

// ── Pooling ────────────────────────────────────────────────────────────────

/// 2x2 stride-2 max pooling. Requires even height and width. The returned
/// argmax codes record the winning in-window position in row-major scan
/// order; on ties the first occurrence wins.
pub(crate) fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let xs = x.shape();
    let (oh, ow) = (xs.h / 2, xs.w / 2);
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, oh, ow));
    let mut arg = vec![0u8; out.shape().numel()];
    for ni in 0..xs.n {
        for ci in 0..xs.c {
            let in_p = x.plane(ni, ci);
            let base = (ni * xs.c + ci) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = in_p[(2 * oy) * xs.w + 2 * ox];
                    let mut code = 0u8;
                    for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate().skip(1) {
                        let v = in_p[(2 * oy + dy) * xs.w + 2 * ox + dx];
                        if v > best {
                            best = v;
                            code = i as u8;
                        }
                    }
                    let o = base + oy * ow + ox;
                    out.data_mut()[o] = best;
                    arg[o] = code;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward<T: Scalar>(gout: &Tensor<T>, arg: &[u8], in_shape: Shape) -> Tensor<T> {
    let (oh, ow) = (gout.shape().h, gout.shape().w);
    let mut gin = Tensor::zeros(in_shape);
    for ni in 0..in_shape.n {
        for ci in 0..in_shape.c {
            let base = (ni * in_shape.c + ci) * oh * ow;
            let gin_p = gin.plane_mut(ni, ci);
            let go_p = gout.plane(ni, ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let code = arg[base + oy * ow + ox] as usize;
                    let (dy, dx) = (code / 2, code % 2);
                    let i = (2 * oy + dy) * in_shape.w + 2 * ox + dx;
                    gin_p[i] = gin_p[i] + go_p[oy * ow + ox];
                }
            }
        }
    }
    gin
}

/// 2x2 stride-2 average pooling with floor semantics: a trailing odd row or
/// column is dropped.
pub(crate) fn avgpool2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let xs = x.shape();
    let (oh, ow) = (xs.h / 2, xs.w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, oh, ow));
    for ni in 0..xs.n {
        for ci in 0..xs.c {
            let in_p = x.plane(ni, ci);
            let out_p = out.plane_mut(ni, ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = (2 * oy) * xs.w + 2 * ox;
                    out_p[oy * ow + ox] =
                        (in_p[i] + in_p[i + 1] + in_p[i + xs.w] + in_p[i + xs.w + 1]) * quarter;
                }
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward<T: Scalar>(gout: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let (oh, ow) = (gout.shape().h, gout.shape().w);
    let quarter = T::from_f64(0.25);
    let mut gin = Tensor::zeros(in_shape);
    for ni in 0..in_shape.n {
        for ci in 0..in_shape.c {
            let go_p = gout.plane(ni, ci);
            let gin_p = gin.plane_mut(ni, ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = go_p[oy * ow + ox] * quarter;
                    let i = (2 * oy) * in_shape.w + 2 * ox;
                    gin_p[i] = gin_p[i] + g;
                    gin_p[i + 1] = gin_p[i + 1] + g;
                    gin_p[i + in_shape.w] = gin_p[i + in_shape.w] + g;
                    gin_p[i + in_shape.w + 1] = gin_p[i + in_shape.w + 1] + g;
                }
            }
        }
    }
    gin
}

pub(crate) fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let xs = x.shape();
    let inv = T::from_f64(1.0 / (xs.h * xs.w) as f64);
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, 1, 1));
    for ni in 0..xs.n {
        for ci in 0..xs.c {
            let s: T = x.plane(ni, ci).iter().copied().sum();
            out.data_mut()[ni * xs.c + ci] = s * inv;
        }
    }
    out
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(gout: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let inv = T::from_f64(1.0 / (in_shape.h * in_shape.w) as f64);
    let mut gin = Tensor::zeros(in_shape);
    for ni in 0..in_shape.n {
        for ci in 0..in_shape.c {
            let g = gout.data()[ni * in_shape.c + ci] * inv;
            gin.plane_mut(ni, ci).fill(g);
        }
    }
    gin
}

/// Adaptive window along one axis: output cell `i` of `out_len` covers input
/// rows `[i*len/out_len, ceil((i+1)*len/out_len))`.
#[inline]
pub(crate) fn adaptive_window(i: usize, len: usize, out_len: usize) -> (usize, usize) {
    (i * len / out_len, ((i + 1) * len + out_len - 1) / out_len)
}

pub(crate) fn adaptive_avg_pool_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let xs = x.shape();
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, oh, ow));
    for ni in 0..xs.n {
        for ci in 0..xs.c {
            let in_p = x.plane(ni, ci);
            let out_p = out.plane_mut(ni, ci);
            for oy in 0..oh {
                let (y0, y1) = adaptive_window(oy, xs.h, oh);
                for ox in 0..ow {
                    let (x0, x1) = adaptive_window(ox, xs.w, ow);
                    let mut s = T::zero();
                    for y in y0..y1 {
                        for xcol in x0..x1 {
                            s = s + in_p[y * xs.w + xcol];
                        }
                    }
                    out_p[oy * ow + ox] = s * T::from_f64(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool_backward<T: Scalar>(gout: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let (oh, ow) = (gout.shape().h, gout.shape().w);
    let mut gin = Tensor::zeros(in_shape);
    for ni in 0..in_shape.n {
        for ci in 0..in_shape.c {
            let go_p = gout.plane(ni, ci);
            let gin_p = gin.plane_mut(ni, ci);
            for oy in 0..oh {
                let (y0, y1) = adaptive_window(oy, in_shape.h, oh);
                for ox in 0..ow {
                    let (x0, x1) = adaptive_window(ox, in_shape.w, ow);
                    let g = go_p[oy * ow + ox] * T::from_f64(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
                    for y in y0..y1 {
                        for xcol in x0..x1 {
                            gin_p[y * in_shape.w + xcol] = gin_p[y * in_shape.w + xcol] + g;
                        }
                    }
                }
            }
        }
    }
    gin
}

// ── Instance normalization ─────────────────────────────────────────────────

/// Normalizes each `(n, c)` plane to zero mean and unit variance (biased
/// variance), then applies the per-channel affine `gamma * xhat + beta`.
/// Returns `(mean, inv_std)` per plane for the backward pass.
pub(crate) fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, Vec<(T, T)>) {
    let xs = x.shape();
    let m = T::from_f64((xs.h * xs.w) as f64);
    let mut out = Tensor::zeros(xs);
    let mut stats = Vec::with_capacity(xs.n * xs.c);
    for ni in 0..xs.n {
        for ci in 0..xs.c {
            let in_p = x.plane(ni, ci);
            let mean = in_p.iter().copied().sum::<T>() / m;
            let var = in_p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let inv_std = T::one() / (var + eps).sqrt();
            stats.push((mean, inv_std));
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            let out_p = out.plane_mut(ni, ci);
            for (o, &v) in out_p.iter_mut().zip(in_p) {
                *o = g * (v - mean) * inv_std + b;
            }
        }
    }
    (out, stats)
}

pub(crate) fn instance_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &[(T, T)],
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let m = T::from_f64((xs.h * xs.w) as f64);
    let mut gx = Tensor::zeros(xs);
    let mut gg = Tensor::zeros(Shape::new(1, xs.c, 1, 1));
    let mut gb = Tensor::zeros(Shape::new(1, xs.c, 1, 1));
    for ni in 0..xs.n {
        for ci in 0..xs.c {
            let (mean, inv_std) = stats[ni * xs.c + ci];
            let in_p = x.plane(ni, ci);
            let go_p = gout.plane(ni, ci);
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for (&g, &v) in go_p.iter().zip(in_p) {
                sum_g = sum_g + g;
                sum_gx = sum_gx + g * (v - mean) * inv_std;
            }
            gb.data_mut()[ci] = gb.data_mut()[ci] + sum_g;
            gg.data_mut()[ci] = gg.data_mut()[ci] + sum_gx;
            let scale = gamma.data()[ci] * inv_std;
            let (mg, mgx) = (sum_g / m, sum_gx / m);
            let gx_p = gx.plane_mut(ni, ci);
            for ((o, &g), &v) in gx_p.iter_mut().zip(go_p).zip(in_p) {
                let xhat = (v - mean) * inv_std;
                *o = scale * (g - mg - xhat * mgx);
            }
        }
    }
    (gx, gg, gb)
}

// ── Bilinear resize ────────────────────────────────────────────────────────

/// Source taps for one output axis with align-corners-false sampling:
/// output position `o` reads input coordinate `(o + 0.5) * in/out - 0.5`,
/// clamped to the valid range (edge replication at the borders).
pub(crate) fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else if src >= (in_len - 1) as f64 {
                (in_len - 1, in_len - 1, 0.0)
            } else {
                let i0 = src.floor() as usize;
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

pub(crate) fn resize_bilinear_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let xs = x.shape();
    let ty = bilinear_taps(oh, xs.h);
    let tx = bilinear_taps(ow, xs.w);
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, oh, ow));
    parallel::for_each_chunk_mut(out.data_mut(), oh * ow, |plane, out_p| {
        let in_p = x.plane(plane / xs.c, plane % xs.c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
            let r0 = &in_p[y0 * xs.w..(y0 + 1) * xs.w];
            let r1 = &in_p[y1 * xs.w..(y1 + 1) * xs.w];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
                let top = wx0 * r0[x0] + wx1 * r0[x1];
                let bot = wx0 * r1[x0] + wx1 * r1[x1];
                out_p[oy * ow + ox] = wy0 * top + wy1 * bot;
            }
        }
    });
    out
}

pub(crate) fn resize_bilinear_backward<T: Scalar>(gout: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let (oh, ow) = (gout.shape().h, gout.shape().w);
    let ty = bilinear_taps(oh, in_shape.h);
    let tx = bilinear_taps(ow, in_shape.w);
    let mut gin = Tensor::zeros(in_shape);
    parallel::for_each_chunk_mut(gin.data_mut(), in_shape.h * in_shape.w, |plane, gin_p| {
        let go_p = gout.plane(plane / in_shape.c, plane % in_shape.c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
                let g = go_p[oy * ow + ox];
                gin_p[y0 * in_shape.w + x0] = gin_p[y0 * in_shape.w + x0] + g * wy0 * wx0;
                gin_p[y0 * in_shape.w + x1] = gin_p[y0 * in_shape.w + x1] + g * wy0 * wx1;
                gin_p[y1 * in_shape.w + x0] = gin_p[y1 * in_shape.w + x0] + g * wy1 * wx0;
                gin_p[y1 * in_shape.w + x1] = gin_p[y1 * in_shape.w + x1] + g * wy1 * wx1;
            }
        }
    });
    gin
}

// ── Fixed-kernel depthwise filtering ───────────────────────────────────────

/// Border handling for [`filter2d_forward`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PadMode {
    /// Missing samples read as zero. With `pad = 0` this is a "valid"
    /// correlation that shrinks the output by `k - 1`.
    Zero,
    /// Mirror without repeating the edge sample (index -1 maps to 1).
    Reflect,
}

#[inline]
fn reflect_idx(i: isize, len: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= len {
        2 * len - 2 - i as usize
    } else {
        i as usize
    }
}

/// Correlates every `(n, c)` plane with the same `k`x`k` kernel.
pub(crate) fn filter2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &[T],
    k: usize,
    pad: usize,
    mode: PadMode,
) -> Tensor<T> {
    let xs = x.shape();
    let (oh, ow) = (xs.h + 2 * pad - k + 1, xs.w + 2 * pad - k + 1);
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, oh, ow));
    parallel::for_each_chunk_mut(out.data_mut(), oh * ow, |plane, out_p| {
        let in_p = x.plane(plane / xs.c, plane % xs.c);
        for oy in 0..oh {
            for ky in 0..k {
                let iy_raw = (oy + ky) as isize - pad as isize;
                let iy = match mode {
                    PadMode::Zero => {
                        if iy_raw < 0 || iy_raw >= xs.h as isize {
                            continue;
                        }
                        iy_raw as usize
                    }
                    PadMode::Reflect => reflect_idx(iy_raw, xs.h),
                };
                let row = &in_p[iy * xs.w..(iy + 1) * xs.w];
                for kx in 0..k {
                    let wgt = kernel[ky * k + kx];
                    if wgt == T::zero() {
                        continue;
                    }
                    // Interior columns map straight onto a contiguous slice.
                    let (ox0, ox1) = tap_range(ow, xs.w, kx, pad);
                    if ox0 < ox1 {
                        let src = &row[ox0 + kx - pad..][..ox1 - ox0];
                        let dst = &mut out_p[oy * ow + ox0..oy * ow + ox1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + wgt * *s;
                        }
                    }
                    if mode == PadMode::Reflect {
                        for ox in (0..ox0).chain(ox1..ow) {
                            let ix = reflect_idx((ox + kx) as isize - pad as isize, xs.w);
                            out_p[oy * ow + ox] = out_p[oy * ow + ox] + wgt * row[ix];
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn filter2d_backward_input<T: Scalar>(
    gout: &Tensor<T>,
    kernel: &[T],
    k: usize,
    pad: usize,
    mode: PadMode,
    in_shape: Shape,
) -> Tensor<T> {
    let (oh, ow) = (gout.shape().h, gout.shape().w);
    let mut gin = Tensor::zeros(in_shape);
    parallel::for_each_chunk_mut(gin.data_mut(), in_shape.h * in_shape.w, |plane, gin_p| {
        let go_p = gout.plane(plane / in_shape.c, plane % in_shape.c);
        for oy in 0..oh {
            for ky in 0..k {
                let iy_raw = (oy + ky) as isize - pad as isize;
                let iy = match mode {
                    PadMode::Zero => {
                        if iy_raw < 0 || iy_raw >= in_shape.h as isize {
                            continue;
                        }
                        iy_raw as usize
                    }
                    PadMode::Reflect => reflect_idx(iy_raw, in_shape.h),
                };
                for kx in 0..k {
                    let wgt = kernel[ky * k + kx];
                    if wgt == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = tap_range(ow, in_shape.w, kx, pad);
                    if ox0 < ox1 {
                        let src = &go_p[oy * ow + ox0..oy * ow + ox1];
                        let dst = &mut gin_p[iy * in_shape.w + ox0 + kx - pad..][..ox1 - ox0];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + wgt * *s;
                        }
                    }
                    if mode == PadMode::Reflect {
                        for ox in (0..ox0).chain(ox1..ow) {
                            let ix = reflect_idx((ox + kx) as isize - pad as isize, in_shape.w);
                            gin_p[iy * in_shape.w + ix] = gin_p[iy * in_shape.w + ix] + wgt * go_p[oy * ow + ox];
                        }
                    }
                }
            }
        }
    });
    gin
}

// ── Reflect padding and cropping ───────────────────────────────────────────

pub(crate) fn pad_reflect_forward<T: Scalar>(x: &Tensor<T>, pad: usize) -> Tensor<T> {
    let s = x.shape();
    let (oh, ow) = (s.h + 2 * pad, s.w + 2 * pad);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    parallel::for_each_chunk_mut(out.data_mut(), oh * ow, |plane, out_p| {
        let x_p = x.plane(plane / s.c, plane % s.c);
        for oy in 0..oh {
            let iy = reflect_idx(oy as isize - pad as isize, s.h);
            let row = &x_p[iy * s.w..(iy + 1) * s.w];
            let dst = &mut out_p[oy * ow..(oy + 1) * ow];
            dst[pad..pad + s.w].copy_from_slice(row);
            for ox in 0..pad {
                dst[ox] = row[reflect_idx(ox as isize - pad as isize, s.w)];
                dst[pad + s.w + ox] = row[reflect_idx((s.w + ox) as isize, s.w)];
            }
        }
    });
    out
}

pub(crate) fn pad_reflect_backward<T: Scalar>(gout: &Tensor<T>, pad: usize, in_shape: Shape) -> Tensor<T> {
    let (oh, ow) = (gout.shape().h, gout.shape().w);
    let mut gin = Tensor::zeros(in_shape);
    parallel::for_each_chunk_mut(gin.data_mut(), in_shape.h * in_shape.w, |plane, gin_p| {
        let go_p = gout.plane(plane / in_shape.c, plane % in_shape.c);
        for oy in 0..oh {
            let iy = reflect_idx(oy as isize - pad as isize, in_shape.h);
            for ox in 0..ow {
                let ix = reflect_idx(ox as isize - pad as isize, in_shape.w);
                gin_p[iy * in_shape.w + ix] = gin_p[iy * in_shape.w + ix] + go_p[oy * ow + ox];
            }
        }
    });
    gin
}

pub(crate) fn crop_forward<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, oh: usize, ow: usize) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    parallel::for_each_chunk_mut(out.data_mut(), oh * ow, |plane, out_p| {
        let x_p = x.plane(plane / s.c, plane % s.c);
        for oy in 0..oh {
            let src = &x_p[(top + oy) * s.w + left..][..ow];
            out_p[oy * ow..(oy + 1) * ow].copy_from_slice(src);
        }
    });
    out
}

pub(crate) fn crop_backward<T: Scalar>(gout: &Tensor<T>, top: usize, left: usize, in_shape: Shape) -> Tensor<T> {
    let (oh, ow) = (gout.shape().h, gout.shape().w);
    let mut gin = Tensor::zeros(in_shape);
    parallel::for_each_chunk_mut(gin.data_mut(), in_shape.h * in_shape.w, |plane, gin_p| {
        let go_p = gout.plane(plane / in_shape.c, plane % in_shape.c);
        for oy in 0..oh {
            let dst = &mut gin_p[(top + oy) * in_shape.w + left..][..ow];
            dst.copy_from_slice(&go_p[oy * ow..(oy + 1) * ow]);
        }
    });
    gin
}

// ── Broadcasting elementwise helpers ───────────────────────────────────────

/// Supported right-hand-side broadcast patterns for binary elementwise ops.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum Broadcast {
    /// Identical shapes.
    Same,
    /// rhs is `(n, c, 1, 1)`: one value per image per channel.
    PerImageChannel,
    /// rhs is `(1, c, 1, 1)`: one value per channel.
    PerChannel,
    /// rhs is `(1, 1, 1, 1)`.
    Scalar,
}

pub(crate) fn broadcast_of(lhs: Shape, rhs: Shape) -> Option<Broadcast> {
    if lhs == rhs {
        Some(Broadcast::Same)
    } else if rhs.is_scalar() {
        Some(Broadcast::Scalar)
    } else if rhs.h == 1 && rhs.w == 1 && rhs.c == lhs.c && rhs.n == lhs.n {
        Some(Broadcast::PerImageChannel)
    } else if rhs.h == 1 && rhs.w == 1 && rhs.c == lhs.c && rhs.n == 1 {
        Some(Broadcast::PerChannel)
    } else {
        None
    }
}

pub(crate) fn ew_apply<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    bc: Broadcast,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let ashape = a.shape();
    let mut out = Tensor::zeros(ashape);
    match bc {
        Broadcast::Same => {
            for ((o, &av), &bv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *o = f(av, bv);
            }
        }
        _ => {
            for ni in 0..ashape.n {
                for ci in 0..ashape.c {
                    let bv = match bc {
                        Broadcast::Scalar => b.data()[0],
                        Broadcast::PerChannel => b.data()[ci],
                        Broadcast::PerImageChannel => b.data()[ni * ashape.c + ci],
                        Broadcast::Same => unreachable!(),
                    };
                    let in_p = a.plane(ni, ci);
                    let out_p = out.plane_mut(ni, ci);
                    for (o, &av) in out_p.iter_mut().zip(in_p) {
                        *o = f(av, bv);
                    }
                }
            }
        }
    }
    out
}

/// Reduces a full-shaped gradient onto a broadcast rhs shape by summing over
/// the broadcast dimensions.
pub(crate) fn reduce_broadcast<T: Scalar>(g: &Tensor<T>, target: Shape, bc: Broadcast) -> Tensor<T> {
    let gs = g.shape();
    match bc {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Tensor::scalar(g.data().iter().copied().sum()),
        Broadcast::PerImageChannel | Broadcast::PerChannel => {
            let mut out = Tensor::zeros(target);
            for ni in 0..gs.n {
                for ci in 0..gs.c {
                    let s: T = g.plane(ni, ci).iter().copied().sum();
                    let idx = if bc == Broadcast::PerImageChannel { ni * gs.c + ci } else { ci };
                    out.data_mut()[idx] = out.data_mut()[idx] + s;
                }
            }
            out
        }
    }
}

/// Sum of all elements, accumulated in `f64` for precision, fixed order.
pub(crate) fn sum_all_f64<T: Scalar>(x: &Tensor<T>) -> f64 {
    x.data().iter().map(|v| v.as_f64()).sum()
}

// ── 3D LUT kernels ─────────────────────────────────────────────────────────

/// Blend taps along one axis for patch-wise LUT application: returns the two
/// `(patch_index, weight)` pairs for a pixel. Patch centers sit at
/// `(i + 0.5) * size/grid - 0.5`; outside the outermost centers the weight
/// clamps to the nearest patch, so the weights always sum to 1.
#[inline]
pub(crate) fn axis_blend_taps(pix: usize, size: usize, grid: usize) -> ((usize, f64), (usize, f64)) {
    if grid == 1 {
        return ((0, 1.0), (0, 0.0));
    }
    let u = ((pix as f64 + 0.5) * grid as f64 / size as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
    let i0 = (u.floor() as usize).min(grid - 2);
    let f = u - i0 as f64;
    ((i0, 1.0 - f), (i0 + 1, f))
}

/// Trilinear cell taps for one color coordinate on a lattice of `v` points
/// spanning [0, 1]. Returns (cell index, fraction, derivative gate); the gate
/// is 0 when the input lies outside the clamped domain.
#[inline]
fn lattice_taps<T: Scalar>(coord: T, v: usize) -> (usize, f64, f64) {
    let x = coord.as_f64();
    let gate = if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 };
    let u = x.clamp(0.0, 1.0) * (v - 1) as f64;
    let i0 = (u.floor() as usize).min(v - 2);
    (i0, u - i0 as f64, gate)
}

/// Looks up `rgb` in a single LUT laid out as 3 channel blocks of `v^3`
/// entries, lattice index `(ib*v + ig)*v + ir` (red fastest). Returns the
/// mapped color.
pub(crate) fn lut_trilinear<T: Scalar>(lut: &[T], v: usize, rgb: [T; 3]) -> [T; 3] {
    let (ir, fr, _) = lattice_taps(rgb[0], v);
    let (ig, fg, _) = lattice_taps(rgb[1], v);
    let (ib, fb, _) = lattice_taps(rgb[2], v);
    let v3 = v * v * v;
    let mut out = [T::zero(); 3];
    for ch in 0..3 {
        let block = &lut[ch * v3..(ch + 1) * v3];
        let mut acc = 0.0;
        for (db, wb) in [(0usize, 1.0 - fb), (1, fb)] {
            for (dg, wg) in [(0usize, 1.0 - fg), (1, fg)] {
                let base = ((ib + db) * v + ig + dg) * v + ir;
                let w = wb * wg;
                acc += w * (1.0 - fr) * block[base].as_f64() + w * fr * block[base + 1].as_f64();
            }
        }
        out[ch] = T::from_f64(acc);
    }
    out
}

/// Patch-wise blended LUT application.
///
/// `x` is `(n, 3, h, w)`; `luts` is `(n, grid*grid*3, v, v*v)` holding one
/// LUT per patch in row-major patch order. Each output pixel blends the
/// trilinear lookups of its (up to) four nearest patch LUTs with bilinear
/// weights relative to the patch centers.
pub(crate) fn lut_apply_forward<T: Scalar>(x: &Tensor<T>, luts: &Tensor<T>, grid: usize) -> Tensor<T> {
    let xs = x.shape();
    let v = luts.shape().h;
    let v3 = v * v * v;
    let patches = grid * grid;
    let mut out = Tensor::zeros(xs);
    let (h, w) = (xs.h, xs.w);
    parallel::for_each_chunk_mut(out.data_mut(), 3 * h * w, |ni, out_img| {
        let lut_base = ni * patches * 3 * v3;
        let luts_d = luts.data();
        let rp = x.plane(ni, 0);
        let gp = x.plane(ni, 1);
        let bp = x.plane(ni, 2);
        for y in 0..h {
            let (ty0, ty1) = axis_blend_taps(y, h, grid);
            for xcol in 0..w {
                let (tx0, tx1) = axis_blend_taps(xcol, w, grid);
                let i = y * w + xcol;
                let rgb = [rp[i], gp[i], bp[i]];
                let mut acc = [T::zero(); 3];
                for &(py, wy) in &[ty0, ty1] {
                    if wy == 0.0 {
                        continue;
                    }
                    for &(px, wx) in &[tx0, tx1] {
                        let bw = wy * wx;
                        if bw == 0.0 {
                            continue;
                        }
                        let p = py * grid + px;
                        let lut = &luts_d[lut_base + p * 3 * v3..lut_base + (p + 1) * 3 * v3];
                        let mapped = lut_trilinear(lut, v, rgb);
                        let bwt = T::from_f64(bw);
                        for ch in 0..3 {
                            acc[ch] = acc[ch] + bwt * mapped[ch];
                        }
                    }
                }
                for ch in 0..3 {
                    out_img[ch * h * w + i] = acc[ch];
                }
            }
        }
    });
    out
}

/// Backward pass of [`lut_apply_forward`]; returns gradients for the input
/// pixels and the LUT entries.
pub(crate) fn lut_apply_backward<T: Scalar>(
    x: &Tensor<T>,
    luts: &Tensor<T>,
    grid: usize,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let v = luts.shape().h;
    let v3 = v * v * v;
    let patches = grid * grid;
    let (h, w) = (xs.h, xs.w);
    let mut gx = Tensor::zeros(xs);
    let mut gluts = Tensor::zeros(luts.shape());

    // Both gradient tensors are per-image disjoint; parallelize over images
    // by processing each image's (gx, gluts) region in one task.
    let gx_images: Vec<(Tensor<T>, Tensor<T>)> = parallel::map_indexed(xs.n, |ni| {
        let mut gx_img = Tensor::zeros(Shape::new(1, 3, h, w));
        let mut gl_img = Tensor::zeros(Shape::new(1, patches * 3, v, v * v));
        let luts_d = &luts.data()[ni * patches * 3 * v3..(ni + 1) * patches * 3 * v3];
        let rp = x.plane(ni, 0);
        let gp = x.plane(ni, 1);
        let bp = x.plane(ni, 2);
        for y in 0..h {
            let (ty0, ty1) = axis_blend_taps(y, h, grid);
            for xcol in 0..w {
                let (tx0, tx1) = axis_blend_taps(xcol, w, grid);
                let i = y * w + xcol;
                let rgb = [rp[i], gp[i], bp[i]];
                let (ir, fr, dr_gate) = lattice_taps(rgb[0], v);
                let (ig, fg, dg_gate) = lattice_taps(rgb[1], v);
                let (ib, fb, db_gate) = lattice_taps(rgb[2], v);
                let go = [
                    gout.plane(ni, 0)[i].as_f64(),
                    gout.plane(ni, 1)[i].as_f64(),
                    gout.plane(ni, 2)[i].as_f64(),
                ];
                let mut d_rgb = [0.0f64; 3];
                for &(py, wy) in &[ty0, ty1] {
                    if wy == 0.0 {
                        continue;
                    }
                    for &(px, wx) in &[tx0, tx1] {
                        let bw = wy * wx;
                        if bw == 0.0 {
                            continue;
                        }
                        let p = py * grid + px;
                        let lut = &luts_d[p * 3 * v3..(p + 1) * 3 * v3];
                        let gl = &mut gl_img.data_mut()[p * 3 * v3..(p + 1) * 3 * v3];
                        for ch in 0..3 {
                            let gch = bw * go[ch];
                            if gch == 0.0 {
                                continue;
                            }
                            let block = &lut[ch * v3..(ch + 1) * v3];
                            let gblock = &mut gl[ch * v3..(ch + 1) * v3];
                            for (db, wb) in [(0usize, 1.0 - fb), (1, fb)] {
                                for (dg, wg) in [(0usize, 1.0 - fg), (1, fg)] {
                                    let base = ((ib + db) * v + ig + dg) * v + ir;
                                    let (c0, c1) = (block[base].as_f64(), block[base + 1].as_f64());
                                    let wgb = wb * wg;
                                    // entry gradients
                                    gblock[base] = gblock[base] + T::from_f64(gch * wgb * (1.0 - fr));
                                    gblock[base + 1] = gblock[base + 1] + T::from_f64(gch * wgb * fr);
                                    // input gradients via the local slopes
                                    d_rgb[0] += gch * wgb * (c1 - c0);
                                    let lr = (1.0 - fr) * c0 + fr * c1;
                                    let sign_g = if dg == 1 { 1.0 } else { -1.0 };
                                    d_rgb[1] += gch * wb * sign_g * lr;
                                    let sign_b = if db == 1 { 1.0 } else { -1.0 };
                                    d_rgb[2] += gch * wg * sign_b * lr;
                                }
                            }
                        }
                    }
                }
                let scale = (v - 1) as f64;
                let gates = [dr_gate, dg_gate, db_gate];
                for ch in 0..3 {
                    gx_img.plane_mut(0, ch)[i] = T::from_f64(d_rgb[ch] * scale * gates[ch]);
                }
            }
        }
        (gx_img, gl_img)
    });

    for (ni, (gx_img, gl_img)) in gx_images.into_iter().enumerate() {
        let dst = &mut gx.data_mut()[ni * 3 * h * w..(ni + 1) * 3 * h * w];
        dst.copy_from_slice(gx_img.data());
        let dst = &mut gluts.data_mut()[ni * patches * 3 * v3..(ni + 1) * patches * 3 * v3];
        dst.copy_from_slice(gl_img.data());
    }
    (gx, gluts)
}

/// Mixes `bank` (shape `(r, 3, v, v*v)`) into per-patch LUTs using `weights`
/// (shape `(n, r, gy, gx)`); output is `(n, gy*gx*3, v, v*v)`.
pub(crate) fn lut_combine_forward<T: Scalar>(weights: &Tensor<T>, bank: &Tensor<T>) -> Tensor<T> {
    let ws = weights.shape();
    let r = bank.shape().n;
    let v = bank.shape().h;
    let v3 = v * v * v;
    let patches = ws.h * ws.w;
    let mut out = Tensor::zeros(Shape::new(ws.n, patches * 3, v, v * v));
    parallel::for_each_chunk_mut(out.data_mut(), 3 * v3, |chunk, out_lut| {
        let ni = chunk / patches;
        let p = chunk % patches;
        for ri in 0..r {
            let wgt = weights.data()[(ni * r + ri) * patches + p];
            if wgt == T::zero() {
                continue;
            }
            let basis = &bank.data()[ri * 3 * v3..(ri + 1) * 3 * v3];
            for (o, &bv) in out_lut.iter_mut().zip(basis) {
                *o = *o + wgt * bv;
            }
        }
    });
    out
}

pub(crate) fn lut_combine_backward<T: Scalar>(
    weights: &Tensor<T>,
    bank: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let ws = weights.shape();
    let r = bank.shape().n;
    let v = bank.shape().h;
    let v3 = v * v * v;
    let patches = ws.h * ws.w;

    let mut gw = Tensor::zeros(ws);
    for ni in 0..ws.n {
        for ri in 0..r {
            let basis = &bank.data()[ri * 3 * v3..(ri + 1) * 3 * v3];
            for p in 0..patches {
                let glut = &gout.data()[(ni * patches + p) * 3 * v3..(ni * patches + p + 1) * 3 * v3];
                let mut acc = T::zero();
                for (&g, &bv) in glut.iter().zip(basis) {
                    acc = acc + g * bv;
                }
                gw.data_mut()[(ni * r + ri) * patches + p] = acc;
            }
        }
    }

    let mut gbank = Tensor::zeros(bank.shape());
    parallel::for_each_chunk_mut(gbank.data_mut(), 3 * v3, |ri, gb| {
        for ni in 0..ws.n {
            for p in 0..patches {
                let wgt = weights.data()[(ni * r + ri) * patches + p];
                if wgt == T::zero() {
                    continue;
                }
                let glut = &gout.data()[(ni * patches + p) * 3 * v3..(ni * patches + p + 1) * 3 * v3];
                for (o, &g) in gb.iter_mut().zip(glut) {
                    *o = *o + wgt * g;
                }
            }
        }
    });
    (gw, gbank)
}
