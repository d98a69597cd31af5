//! Dense f64 kernels used by the tape ops: im2col convolution and bilinear resize.

use ndarray::{Array1, Array2, Array4, ArrayView4};

/// Output spatial size of a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `x` (N,C,H,W) into a (C*kh*kw, N*OH*OW) matrix. Zero padding.
pub fn im2col(x: &ArrayView4<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, n * oh * ow));
    for ni in 0..n {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cols[[row, (ni * oh + oi) * ow + oj]] =
                                x[[ni, ci, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a (C*kh*kw, N*OH*OW) gradient matrix back onto the input layout.
pub fn col2im(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            out[[ni, ci, ii as usize, jj as usize]] +=
                                cols[[row, (ni * oh + oi) * ow + oj]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution forward: x (N,Cin,H,W), w (Cout,Cin,kh,kw), optional bias (Cout).
pub fn conv2d(
    x: &ArrayView4<f64>,
    w: &Array4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    conv2d_keep_cols(x, w, b, stride, pad).0
}

/// Convolution forward returning the unfolded input for reuse in backward.
pub fn conv2d_keep_cols(
    x: &ArrayView4<f64>,
    w: &Array4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array2<f64>) {
    let (n, _c, h, wd) = x.dim();
    let (cout, _cin, kh, kw) = w.dim();
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let w_mat = w
        .view()
        .into_shape_with_order((cout, w.len() / cout))
        .expect("conv weight is contiguous");
    let y_mat = w_mat.dot(&cols); // (Cout, N*OH*OW)
    let mut y = Array4::<f64>::zeros((n, cout, oh, ow));
    for ni in 0..n {
        for co in 0..cout {
            let bias = b.map_or(0.0, |bb| bb[co]);
            for oi in 0..oh {
                for oj in 0..ow {
                    y[[ni, co, oi, oj]] = y_mat[[co, (ni * oh + oi) * ow + oj]] + bias;
                }
            }
        }
    }
    (y, cols)
}

/// Gradients of `conv2d` w.r.t. input, weight and bias. `cols` is the
/// unfolded input saved from the forward pass (recomputed when absent).
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    w: &Array4<f64>,
    grad_y: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    saved_cols: Option<&Array2<f64>>,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, c, h, wd) = x.dim();
    let (cout, cin, kh, kw) = w.dim();
    let (_, _, oh, ow) = grad_y.dim();
    let mut g_mat = Array2::<f64>::zeros((cout, n * oh * ow));
    for ni in 0..n {
        for co in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    g_mat[[co, (ni * oh + oi) * ow + oj]] = grad_y[[ni, co, oi, oj]];
                }
            }
        }
    }
    let rebuilt;
    let cols = match saved_cols {
        Some(c) => c,
        None => {
            rebuilt = im2col(x, kh, kw, stride, pad);
            &rebuilt
        }
    };
    let grad_w_mat = g_mat.dot(&cols.t()); // (Cout, Cin*kh*kw)
    let grad_w = grad_w_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("weight grad shape");
    let grad_b = g_mat.sum_axis(ndarray::Axis(1));
    let w_mat = w
        .view()
        .into_shape_with_order((cout, w.len() / cout))
        .expect("conv weight is contiguous");
    let grad_cols = w_mat.t().dot(&g_mat);
    let grad_x = col2im(&grad_cols, n, c, h, wd, kh, kw, stride, pad);
    (grad_x, grad_w, grad_b)
}

/// Per-axis overlap weights of output cell `o` against input cells, for
/// area-averaging resize: the output cell covers [o*in/out, (o+1)*in/out).
fn area_weights(out_len: usize, in_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o as f64 + 1.0) * scale;
            let mut ws = Vec::new();
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(in_len);
            for i in first..last {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    ws.push((i, overlap / scale));
                }
            }
            ws
        })
        .collect()
}

/// Area-averaging resize of (N,C,H,W) to (N,C,oh,ow): each output is the
/// exact mean of its (possibly fractional) source box. Mass-preserving, so
/// downsampled masks never lose isolated foreground.
pub fn resize_area(x: &ArrayView4<f64>, oh: usize, ow: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    if h == oh && w == ow {
        return x.to_owned();
    }
    let rows = area_weights(oh, h);
    let cols = area_weights(ow, w);
    let mut y = Array4::<f64>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for (oi, rws) in rows.iter().enumerate() {
                for (oj, cws) in cols.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(i, wi) in rws {
                        for &(j, wj) in cws {
                            acc += wi * wj * x[[ni, ci, i, j]];
                        }
                    }
                    y[[ni, ci, oi, oj]] = acc;
                }
            }
        }
    }
    y
}

/// Transpose of `resize_area`.
pub fn resize_area_backward(grad_y: &ArrayView4<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c, oh, ow) = grad_y.dim();
    if h == oh && w == ow {
        return grad_y.to_owned();
    }
    let rows = area_weights(oh, h);
    let cols = area_weights(ow, w);
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for (oi, rws) in rows.iter().enumerate() {
                for (oj, cws) in cols.iter().enumerate() {
                    let g = grad_y[[ni, ci, oi, oj]];
                    for &(i, wi) in rws {
                        for &(j, wj) in cws {
                            gx[[ni, ci, i, j]] += g * wi * wj;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Max pooling forward. Ties resolve to the first maximum in scan order.
pub fn max_pool2d(
    x: &ArrayView4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut y = Array4::<f64>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ki in 0..k {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let v = x[[ni, ci, ii as usize, jj as usize]];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    y[[ni, ci, oi, oj]] = best;
                }
            }
        }
    }
    y
}

/// Gradient of max pooling: route each output gradient to the first argmax.
pub fn max_pool2d_backward(
    x: &ArrayView4<f64>,
    grad_y: &ArrayView4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (_, _, oh, ow) = grad_y.dim();
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = (0usize, 0usize);
                    for ki in 0..k {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let v = x[[ni, ci, ii as usize, jj as usize]];
                            if v > best {
                                best = v;
                                arg = (ii as usize, jj as usize);
                            }
                        }
                    }
                    gx[[ni, ci, arg.0, arg.1]] += grad_y[[ni, ci, oi, oj]];
                }
            }
        }
    }
    gx
}

/// Source coordinates and weights for one output index under half-pixel bilinear mapping.
#[inline]
fn lerp_coords(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = (o as f64 + 0.5) * scale - 0.5;
    let src = src.max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = (src - i0 as f64).clamp(0.0, 1.0);
    (i0, i1, frac)
}

/// Bilinear resize of (N,C,H,W) to (N,C,oh,ow), half-pixel convention, no corner alignment.
pub fn resize_bilinear(x: &ArrayView4<f64>, oh: usize, ow: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    if h == oh && w == ow {
        return x.to_owned();
    }
    let mut y = Array4::<f64>::zeros((n, c, oh, ow));
    let rows: Vec<(usize, usize, f64)> = (0..oh).map(|o| lerp_coords(o, oh, h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..ow).map(|o| lerp_coords(o, ow, w)).collect();
    for ni in 0..n {
        for ci in 0..c {
            for (oi, &(i0, i1, fi)) in rows.iter().enumerate() {
                for (oj, &(j0, j1, fj)) in cols.iter().enumerate() {
                    let v00 = x[[ni, ci, i0, j0]];
                    let v01 = x[[ni, ci, i0, j1]];
                    let v10 = x[[ni, ci, i1, j0]];
                    let v11 = x[[ni, ci, i1, j1]];
                    let top = v00 + (v01 - v00) * fj;
                    let bot = v10 + (v11 - v10) * fj;
                    y[[ni, ci, oi, oj]] = top + (bot - top) * fi;
                }
            }
        }
    }
    y
}

/// Transpose of `resize_bilinear`: scatter output gradients back to input positions.
pub fn resize_bilinear_backward(
    grad_y: &ArrayView4<f64>,
    h: usize,
    w: usize,
) -> Array4<f64> {
    let (n, c, oh, ow) = grad_y.dim();
    if h == oh && w == ow {
        return grad_y.to_owned();
    }
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    let rows: Vec<(usize, usize, f64)> = (0..oh).map(|o| lerp_coords(o, oh, h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..ow).map(|o| lerp_coords(o, ow, w)).collect();
    for ni in 0..n {
        for ci in 0..c {
            for (oi, &(i0, i1, fi)) in rows.iter().enumerate() {
                for (oj, &(j0, j1, fj)) in cols.iter().enumerate() {
                    let g = grad_y[[ni, ci, oi, oj]];
                    gx[[ni, ci, i0, j0]] += g * (1.0 - fi) * (1.0 - fj);
                    gx[[ni, ci, i0, j1]] += g * (1.0 - fi) * fj;
                    gx[[ni, ci, i1, j0]] += g * fi * (1.0 - fj);
                    gx[[ni, ci, i1, j1]] += g * fi * fj;
                }
            }
        }
    }
    gx
}
