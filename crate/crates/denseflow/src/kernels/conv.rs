//! Convolution and transposed convolution via im2col + GEMM.

use crate::tensor::Scalar;

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output extent of a transposed convolution along one axis.
pub fn convt_out_extent(input: usize, kernel: usize, stride: usize, pad: usize, opad: usize) -> usize {
    (input - 1) * stride + kernel + opad - 2 * pad
}

/// Unfold one image `x` of dims (c, h, w) into `col` laid out [c*kh*kw, oh*ow].
#[allow(clippy::too_many_arguments)]
fn im2col_kl<E: Scalar>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [E],
) {
    let l = oh * ow;
    debug_assert_eq!(col.len(), c * kh * kw * l);
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((ch * kh + i) * kw + j) * l..][..l];
                for oy in 0..oh {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::ZERO);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            E::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Unfold one image into `col` laid out [oh*ow, c*kh*kw] (transposed im2col).
#[allow(clippy::too_many_arguments)]
fn im2col_lk<E: Scalar>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [E],
) {
    let k = c * kh * kw;
    debug_assert_eq!(col.len(), oh * ow * k);
    col.fill(E::ZERO);
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let kidx = (ch * kh + i) * kw + j;
                for oy in 0..oh {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            col[(oy * ow + ox) * k + kidx] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Fold `col` [c*kh*kw, oh*ow] back into an image of dims (c, h, w), adding.
#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Scalar>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [E],
) {
    let l = oh * ow;
    for ch in 0..c {
        let xc = &mut x[ch * h * w..(ch + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((ch * kh + i) * kw + j) * l..][..l];
                for oy in 0..oh {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn transpose<E: Scalar>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut t = vec![E::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Forward convolution. `x` is [n, cin, h, w], `weight` [cout, cin, kh, kw],
/// `bias` [cout]. Returns the output buffer of dims (n, cout, oh, ow).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<E: Scalar>(
    x: &[E],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[E],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: &[E],
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let l = oh * ow;
    let k = cin * kh * kw;
    let mut out = vec![E::ZERO; n * cout * l];
    let mut col = vec![E::ZERO; k * l];
    for img in 0..n {
        im2col_kl(&x[img * cin * h * w..], cin, h, w, kh, kw, stride, pad, oh, ow, &mut col);
        let dst = &mut out[img * cout * l..(img + 1) * cout * l];
        E::gemm(cout, k, l, E::ONE, weight, &col, E::ZERO, dst);
        for co in 0..cout {
            let b = bias[co];
            for v in &mut dst[co * l..(co + 1) * l] {
                *v += b;
            }
        }
    }
    out
}

/// Gradient of a convolution with respect to its input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input<E: Scalar>(
    gout: &[E],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[E],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let l = oh * ow;
    let k = cin * kh * kw;
    let wt = transpose(weight, cout, k); // [k, cout]
    let mut gin = vec![E::ZERO; n * cin * h * w];
    let mut tmp = vec![E::ZERO; k * l];
    for img in 0..n {
        E::gemm(k, cout, l, E::ONE, &wt, &gout[img * cout * l..][..cout * l], E::ZERO, &mut tmp);
        col2im_add(&tmp, cin, h, w, kh, kw, stride, pad, oh, ow, &mut gin[img * cin * h * w..]);
    }
    gin
}

/// Gradients of a convolution with respect to its weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_params<E: Scalar>(
    x: &[E],
    gout: &[E],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<E>, Vec<E>) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let l = oh * ow;
    let k = cin * kh * kw;
    let mut gw = vec![E::ZERO; cout * k];
    let mut gb = vec![E::ZERO; cout];
    let mut col_t = vec![E::ZERO; l * k];
    for img in 0..n {
        im2col_lk(&x[img * cin * h * w..], cin, h, w, kh, kw, stride, pad, oh, ow, &mut col_t);
        let go = &gout[img * cout * l..][..cout * l];
        E::gemm(cout, l, k, E::ONE, go, &col_t, E::ONE, &mut gw);
        for co in 0..cout {
            let mut s = E::ZERO;
            for &g in &go[co * l..(co + 1) * l] {
                s += g;
            }
            gb[co] += s;
        }
    }
    (gw, gb)
}

/// Forward transposed convolution (scatter-add semantics). `x` is
/// [n, cin, h, w], `weight` [cin, cout, kh, kw], `bias` [cout].
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_fwd<E: Scalar>(
    x: &[E],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[E],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: &[E],
    stride: usize,
    pad: usize,
    opad: usize,
) -> Vec<E> {
    let th = convt_out_extent(h, kh, stride, pad, opad);
    let tw = convt_out_extent(w, kw, stride, pad, opad);
    let l = h * w;
    let k = cout * kh * kw;
    let wt = transpose(weight, cin, k); // [k, cin]
    let mut out = vec![E::ZERO; n * cout * th * tw];
    let mut tmp = vec![E::ZERO; k * l];
    for img in 0..n {
        E::gemm(k, cin, l, E::ONE, &wt, &x[img * cin * l..][..cin * l], E::ZERO, &mut tmp);
        let dst = &mut out[img * cout * th * tw..(img + 1) * cout * th * tw];
        col2im_add(&tmp, cout, th, tw, kh, kw, stride, pad, h, w, dst);
        for co in 0..cout {
            let b = bias[co];
            for v in &mut dst[co * th * tw..(co + 1) * th * tw] {
                *v += b;
            }
        }
    }
    out
}

/// Gradient of a transposed convolution with respect to its input.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_bwd_input<E: Scalar>(
    gout: &[E],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[E],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    opad: usize,
) -> Vec<E> {
    let th = convt_out_extent(h, kh, stride, pad, opad);
    let tw = convt_out_extent(w, kw, stride, pad, opad);
    let l = h * w;
    let k = cout * kh * kw;
    let mut gin = vec![E::ZERO; n * cin * l];
    let mut col = vec![E::ZERO; k * l];
    for img in 0..n {
        im2col_kl(&gout[img * cout * th * tw..], cout, th, tw, kh, kw, stride, pad, h, w, &mut col);
        E::gemm(cin, k, l, E::ONE, weight, &col, E::ZERO, &mut gin[img * cin * l..][..cin * l]);
    }
    gin
}

/// Gradients of a transposed convolution with respect to weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_bwd_params<E: Scalar>(
    x: &[E],
    gout: &[E],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    opad: usize,
) -> (Vec<E>, Vec<E>) {
    let th = convt_out_extent(h, kh, stride, pad, opad);
    let tw = convt_out_extent(w, kw, stride, pad, opad);
    let l = h * w;
    let k = cout * kh * kw;
    let mut gw = vec![E::ZERO; cin * k];
    let mut gb = vec![E::ZERO; cout];
    let mut col_t = vec![E::ZERO; l * k];
    for img in 0..n {
        im2col_lk(&gout[img * cout * th * tw..], cout, th, tw, kh, kw, stride, pad, h, w, &mut col_t);
        E::gemm(cin, l, k, E::ONE, &x[img * cin * l..][..cin * l], &col_t, E::ONE, &mut gw);
        let go = &gout[img * cout * th * tw..][..cout * th * tw];
        for co in 0..cout {
            let mut s = E::ZERO;
            for &g in &go[co * th * tw..(co + 1) * th * tw] {
                s += g;
            }
            gb[co] += s;
        }
    }
    (gw, gb)
}
