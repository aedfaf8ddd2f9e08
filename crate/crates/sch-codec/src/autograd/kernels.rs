//! Pure array kernels used by the tape ops: convolutions, wavelet
//! butterflies, window rearrangements, pixel shuffle.
//!
//! Everything here is a plain function of its inputs; the tape layer pairs
//! each kernel with its adjoint to produce gradients.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, ArrayViewD, Axis, IxDyn};

use super::Scalar;

/// 2-D convolution output size for one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn as3<T: Scalar>(x: &ArrayViewD<'_, T>) -> ndarray::ArrayView3<'_, T> {
    x.view().into_dimensionality::<ndarray::Ix3>().unwrap()
}

/// im2col for a (C, H, W) input: rows are output positions, columns are
/// (channel, ky, kx) patch entries. Zero padding.
fn im2col<T: Scalar>(
    x: &ArrayViewD<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let x = as3(x);
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut col = Array2::<T>::zeros((oh * ow, c * kh * kw));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut col_row = col.row_mut(row);
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col_row[ci * kh * kw + ky * kw + kx] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add adjoint of `im2col`.
fn col2im<T: Scalar>(
    dcol: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut dx = Array3::<T>::zeros((c, h, w));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = dcol.row(oy * ow + ox);
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci, iy as usize, ix as usize)] =
                            dx[(ci, iy as usize, ix as usize)] + row[ci * kh * kw + ky * kw + kx];
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

/// Forward conv2d: x (C,H,W) * w (Cout,Cin,kh,kw) + b (Cout) -> (Cout,H',W').
pub fn conv2d_fwd<T: Scalar>(
    x: &ArrayViewD<'_, T>,
    w: &ArrayViewD<'_, T>,
    b: Option<&ArrayViewD<'_, T>>,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let (cout, cin, kh, kw) = {
        let s = w.shape();
        (s[0], s[1], s[2], s[3])
    };
    let xs = x.shape();
    assert_eq!(xs[0], cin, "conv2d channel mismatch");
    let oh = conv_out_len(xs[1], kh, stride, pad);
    let ow = conv_out_len(xs[2], kw, stride, pad);
    let col = im2col(x, kh, kw, stride, pad);
    let wmat = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight reshape");
    // (Cout, CinKhKw) x (CinKhKw, OhOw) -> (Cout, OhOw)
    let out2 = wmat.dot(&col.t());
    let mut out = out2
        .into_shape_with_order((cout, oh, ow))
        .expect("conv out reshape");
    if let Some(b) = b {
        let b = b.to_shape((cout, 1, 1)).expect("bias reshape");
        out = out + &b;
    }
    out.into_dyn()
}

/// Backward conv2d: returns (dx, dw, db).
pub fn conv2d_bwd<T: Scalar>(
    x: &ArrayViewD<'_, T>,
    w: &ArrayViewD<'_, T>,
    dy: &ArrayViewD<'_, T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> (Option<ArrayD<T>>, ArrayD<T>, ArrayD<T>) {
    let (cout, cin, kh, kw) = {
        let s = w.shape();
        (s[0], s[1], s[2], s[3])
    };
    let xs = x.shape();
    let dys = dy.shape();
    let dy2 = dy
        .to_shape((cout, dys[1] * dys[2]))
        .expect("dy reshape")
        .to_owned();
    let col = im2col(x, kh, kw, stride, pad);
    // dw = dy2 (Cout, P) x col (P, CinKhKw)
    let dw = dy2
        .dot(&col)
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("dw reshape")
        .into_dyn();
    let db = dy2.sum_axis(Axis(1)).into_dyn();
    let dx = if want_dx {
        let wmat = w.to_shape((cout, cin * kh * kw)).expect("w reshape");
        // dcol = dy2^T (P, Cout) x wmat (Cout, CinKhKw)
        let dcol = dy2.t().dot(&wmat);
        Some(col2im(&dcol, cin, xs[1], xs[2], kh, kw, stride, pad))
    } else {
        None
    };
    (dx, dw, db)
}

/// Depthwise conv2d, stride 1: x (C,H,W) * w (C,kh,kw) -> (C,H,W) with zero pad.
pub fn dwconv2d_fwd<T: Scalar>(
    x: &ArrayViewD<'_, T>,
    w: &ArrayViewD<'_, T>,
    pad: usize,
) -> ArrayD<T> {
    let x = as3(x);
    let (c, h, wd) = x.dim();
    let ws = w.shape();
    let (kh, kw) = (ws[1], ws[2]);
    let mut out = Array3::<T>::zeros((c, h, wd));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let wv = w[[ci, ky, kx]];
                if wv == T::zero() {
                    continue;
                }
                for y in 0..h {
                    let iy = (y + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xx in 0..wd {
                        let ix = (xx + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        out[(ci, y, xx)] =
                            out[(ci, y, xx)] + wv * x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    out.into_dyn()
}

/// Backward of depthwise conv2d: returns (dx, dw).
pub fn dwconv2d_bwd<T: Scalar>(
    x: &ArrayViewD<'_, T>,
    w: &ArrayViewD<'_, T>,
    dy: &ArrayViewD<'_, T>,
    pad: usize,
) -> (ArrayD<T>, ArrayD<T>) {
    let x = as3(x);
    let dy = as3(dy);
    let (c, h, wd) = x.dim();
    let ws = w.shape();
    let (kh, kw) = (ws[1], ws[2]);
    let mut dx = Array3::<T>::zeros((c, h, wd));
    let mut dw = Array3::<T>::zeros((c, kh, kw));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let wv = w[[ci, ky, kx]];
                let mut acc = T::zero();
                for y in 0..h {
                    let iy = (y + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xx in 0..wd {
                        let ix = (xx + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let g = dy[(ci, y, xx)];
                        acc = acc + g * x[(ci, iy as usize, ix as usize)];
                        dx[(ci, iy as usize, ix as usize)] =
                            dx[(ci, iy as usize, ix as usize)] + wv * g;
                    }
                }
                dw[(ci, ky, kx)] = acc;
            }
        }
    }
    (dx.into_dyn(), dw.into_dyn())
}

/// 1-D depthwise convolution along the channel-token axis of a windowed,
/// transposed tensor: x (n, C, L) * w (L, k) -> (n, C, L), zero padded so the
/// channel-token count is preserved. Each of the L per-window positions has
/// its own kernel over neighbouring channel tokens.
pub fn chanconv1d_fwd<T: Scalar>(x: &ArrayViewD<'_, T>, w: &ArrayView2<'_, T>) -> ArrayD<T> {
    let x = as3(x);
    let (n, c, l) = x.dim();
    let k = w.shape()[1];
    let half = k / 2;
    let mut out = Array3::<T>::zeros((n, c, l));
    for i in 0..n {
        for ci in 0..c {
            for li in 0..l {
                let mut acc = T::zero();
                for j in 0..k {
                    let src = ci as isize + j as isize - half as isize;
                    if src < 0 || src >= c as isize {
                        continue;
                    }
                    acc = acc + w[(li, j)] * x[(i, src as usize, li)];
                }
                out[(i, ci, li)] = acc;
            }
        }
    }
    out.into_dyn()
}

/// Backward of `chanconv1d_fwd`: returns (dx, dw).
pub fn chanconv1d_bwd<T: Scalar>(
    x: &ArrayViewD<'_, T>,
    w: &ArrayView2<'_, T>,
    dy: &ArrayViewD<'_, T>,
) -> (ArrayD<T>, ArrayD<T>) {
    let x = as3(x);
    let dy = as3(dy);
    let (n, c, l) = x.dim();
    let k = w.shape()[1];
    let half = k / 2;
    let mut dx = Array3::<T>::zeros((n, c, l));
    let mut dw = Array2::<T>::zeros((l, k));
    for i in 0..n {
        for ci in 0..c {
            for li in 0..l {
                let g = dy[(i, ci, li)];
                for j in 0..k {
                    let src = ci as isize + j as isize - half as isize;
                    if src < 0 || src >= c as isize {
                        continue;
                    }
                    let s = src as usize;
                    dx[(i, s, li)] = dx[(i, s, li)] + w[(li, j)] * g;
                    dw[(li, j)] = dw[(li, j)] + x[(i, s, li)] * g;
                }
            }
        }
    }
    (dx.into_dyn(), dw.into_dyn())
}

/// Depth-to-space (pixel shuffle): (C·r², H, W) -> (C, rH, rW).
pub fn depth_to_space<T: Scalar>(x: &ArrayViewD<'_, T>, r: usize) -> ArrayD<T> {
    let x = as3(x);
    let (cr2, h, w) = x.dim();
    assert_eq!(cr2 % (r * r), 0, "depth_to_space channel count");
    let c = cr2 / (r * r);
    let mut out = Array3::<T>::zeros((c, h * r, w * r));
    for ci in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let src_c = ci * r * r + dy * r + dx;
                for y in 0..h {
                    for xx in 0..w {
                        out[(ci, y * r + dy, xx * r + dx)] = x[(src_c, y, xx)];
                    }
                }
            }
        }
    }
    out.into_dyn()
}

/// Space-to-depth, the exact inverse (and adjoint) of `depth_to_space`.
pub fn space_to_depth<T: Scalar>(x: &ArrayViewD<'_, T>, r: usize) -> ArrayD<T> {
    let x = as3(x);
    let (c, hr, wr) = x.dim();
    assert!(hr % r == 0 && wr % r == 0, "space_to_depth spatial dims");
    let (h, w) = (hr / r, wr / r);
    let mut out = Array3::<T>::zeros((c * r * r, h, w));
    for ci in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let dst_c = ci * r * r + dy * r + dx;
                for y in 0..h {
                    for xx in 0..w {
                        out[(dst_c, y, xx)] = x[(ci, y * r + dy, xx * r + dx)];
                    }
                }
            }
        }
    }
    out.into_dyn()
}

/// Window partition: (C, H, W) -> (n, ws², C) with windows in row-major grid
/// order and tokens in row-major order inside each window.
pub fn window_partition<T: Scalar>(x: &ArrayViewD<'_, T>, ws: usize) -> ArrayD<T> {
    let x = as3(x);
    let (c, h, w) = x.dim();
    assert!(h % ws == 0 && w % ws == 0, "window_partition divisibility");
    let (nh, nw) = (h / ws, w / ws);
    let n = nh * nw;
    let l = ws * ws;
    let mut out = Array3::<T>::zeros((n, l, c));
    for wi in 0..nh {
        for wj in 0..nw {
            let win = wi * nw + wj;
            for ti in 0..ws {
                for tj in 0..ws {
                    let tok = ti * ws + tj;
                    for ci in 0..c {
                        out[(win, tok, ci)] = x[(ci, wi * ws + ti, wj * ws + tj)];
                    }
                }
            }
        }
    }
    out.into_dyn()
}

/// Window reverse: exact inverse (and adjoint) of `window_partition`.
pub fn window_reverse<T: Scalar>(t: &ArrayViewD<'_, T>, ws: usize, h: usize, w: usize) -> ArrayD<T> {
    let t = as3(t);
    let (n, l, c) = t.dim();
    let (nh, nw) = (h / ws, w / ws);
    assert_eq!(n, nh * nw, "window_reverse grid mismatch");
    assert_eq!(l, ws * ws, "window_reverse token count");
    let mut out = Array3::<T>::zeros((c, h, w));
    for wi in 0..nh {
        for wj in 0..nw {
            let win = wi * nw + wj;
            for ti in 0..ws {
                for tj in 0..ws {
                    let tok = ti * ws + tj;
                    for ci in 0..c {
                        out[(ci, wi * ws + ti, wj * ws + tj)] = t[(win, tok, ci)];
                    }
                }
            }
        }
    }
    out.into_dyn()
}

/// Haar analysis butterfly with an explicit scale factor. Output bands are
/// grouped `[LL(all C), HL(all C), LH(all C), HH(all C)]`.
pub fn dwt2_kernel<T: Scalar>(x: &ArrayViewD<'_, T>, factor: T) -> ArrayD<T> {
    let x = as3(x);
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "dwt2 needs even dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<T>::zeros((4 * c, oh, ow));
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let a = x[(ci, 2 * i, 2 * j)];
                let b = x[(ci, 2 * i, 2 * j + 1)];
                let cc = x[(ci, 2 * i + 1, 2 * j)];
                let d = x[(ci, 2 * i + 1, 2 * j + 1)];
                out[(ci, i, j)] = (a + b + cc + d) * factor;
                out[(c + ci, i, j)] = (b - a + d - cc) * factor;
                out[(2 * c + ci, i, j)] = (cc + d - a - b) * factor;
                out[(3 * c + ci, i, j)] = (a - b - cc + d) * factor;
            }
        }
    }
    out.into_dyn()
}

/// Haar synthesis butterfly (transpose of the analysis butterfly) with an
/// explicit scale factor. `idwt2_kernel(dwt2_kernel(x, f), 1/(4f))` is the
/// identity; with the orthonormal factor 0.5 both directions use 0.5.
pub fn idwt2_kernel<T: Scalar>(y: &ArrayViewD<'_, T>, factor: T) -> ArrayD<T> {
    let y = as3(y);
    let (c4, oh, ow) = y.dim();
    assert!(c4 % 4 == 0, "idwt2 needs 4k channels");
    let c = c4 / 4;
    let mut out = Array3::<T>::zeros((c, oh * 2, ow * 2));
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let ll = y[(ci, i, j)];
                let hl = y[(c + ci, i, j)];
                let lh = y[(2 * c + ci, i, j)];
                let hh = y[(3 * c + ci, i, j)];
                out[(ci, 2 * i, 2 * j)] = (ll - hl - lh + hh) * factor;
                out[(ci, 2 * i, 2 * j + 1)] = (ll + hl - lh - hh) * factor;
                out[(ci, 2 * i + 1, 2 * j)] = (ll - hl + lh - hh) * factor;
                out[(ci, 2 * i + 1, 2 * j + 1)] = (ll + hl + lh + hh) * factor;
            }
        }
    }
    out.into_dyn()
}

/// Reduce `g` so it matches `target_shape` by summing over broadcast axes
/// (extra leading axes and axes of size 1).
pub fn reduce_to_shape<T: Scalar>(g: &ArrayViewD<'_, T>, target_shape: &[usize]) -> ArrayD<T> {
    let mut g = g.to_owned();
    while g.ndim() > target_shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &td)) in g
        .shape()
        .to_vec()
        .iter()
        .zip(target_shape.iter())
        .enumerate()
        .collect::<Vec<_>>()
    {
        if gd != td {
            debug_assert_eq!(td, 1, "reduce_to_shape: incompatible broadcast");
            let summed = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            g = summed;
        }
    }
    g
}

/// Row-major reshape that tolerates non-contiguous inputs.
pub fn reshape_to<T: Scalar>(a: &ArrayViewD<'_, T>, shape: &[usize]) -> ArrayD<T> {
    a.as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape_to: element count mismatch")
}

/// Sum along the last axis, keeping the axis with length 1.
pub fn sum_last_keepdim<T: Scalar>(a: &ArrayViewD<'_, T>) -> ArrayD<T> {
    let last = a.ndim() - 1;
    a.sum_axis(Axis(last)).insert_axis(Axis(last))
}

/// Mean vector along the last axis (flattened leading dims): (P,) for (..., D).
pub fn rows_of<T: Scalar>(a: &ArrayViewD<'_, T>) -> (usize, usize) {
    let d = *a.shape().last().expect("rows_of on 0-d array");
    (a.len() / d, d)
}

/// View an N-d array as (rows, last-dim) without copying when contiguous.
pub fn as_rows<T: Scalar>(a: &ArrayViewD<'_, T>) -> Array2<T> {
    let (p, d) = rows_of(a);
    a.as_standard_layout()
        .to_owned()
        .into_shape_with_order((p, d))
        .expect("as_rows reshape")
}

/// Stack of per-batch matrix products: out_i = a_i · b_i (optionally b_iᵀ).
pub fn bmm<T: Scalar>(a: &ArrayViewD<'_, T>, b: &ArrayViewD<'_, T>, trans_b: bool) -> ArrayD<T> {
    let a3 = as3(a);
    let b3 = as3(b);
    let (nb, m, k) = a3.dim();
    let (nb2, bd0, bd1) = b3.dim();
    assert_eq!(nb, nb2, "bmm batch mismatch");
    let n = if trans_b { bd0 } else { bd1 };
    assert_eq!(if trans_b { bd1 } else { bd0 }, k, "bmm inner dim mismatch");
    let mut out = Array3::<T>::zeros((nb, m, n));
    for i in 0..nb {
        let ai = a3.index_axis(Axis(0), i);
        let bi = b3.index_axis(Axis(0), i);
        let prod = if trans_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
        out.index_axis_mut(Axis(0), i).assign(&prod);
    }
    out.into_dyn()
}

/// L2 norm of a flat slice.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Bias vector broadcast-add over the last axis.
pub fn add_bias_last<T: Scalar>(a: &mut ArrayD<T>, b: &Array1<T>) {
    let d = *a.shape().last().unwrap();
    assert_eq!(d, b.len(), "bias length mismatch");
    for mut row in a.rows_mut() {
        for (v, &bv) in row.iter_mut().zip(b.iter()) {
            *v = *v + bv;
        }
    }
}
