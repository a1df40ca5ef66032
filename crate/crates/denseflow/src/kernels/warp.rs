//! Differentiable inverse warping by bilinear sampling.
//!
//! The warp reconstructs frame 1 by sampling frame 2 at flow-displaced
//! coordinates: out(y, x) = I2(y + v, x + u). Out-of-bounds sample points
//! are clamped to the border; the flow gradient in a clamped direction is
//! zero there.

use crate::tensor::Scalar;

/// One bilinear sample site: corner indices, weights, and whether each axis
/// was clamped at the image border.
struct Site {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    clamped_x: bool,
    clamped_y: bool,
}

fn site(sx: f64, sy: f64, h: usize, w: usize) -> Site {
    let clamped_x = sx < 0.0 || sx > (w - 1) as f64;
    let clamped_y = sy < 0.0 || sy > (h - 1) as f64;
    let cx = sx.clamp(0.0, (w - 1) as f64);
    let cy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = (cx.floor() as usize).min(w - 1);
    let y0 = (cy.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Site {
        x0,
        x1,
        y0,
        y1,
        wx: cx - x0 as f64,
        wy: cy - y0 as f64,
        clamped_x,
        clamped_y,
    }
}

/// Forward warp. `image` is [n, c, h, w]; `flow` is [n, 2, h, w] with
/// channel 0 the horizontal displacement u and channel 1 the vertical v.
pub fn bilinear_warp_fwd<E: Scalar>(
    image: &[E],
    flow: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<E> {
    let mut out = vec![E::ZERO; n * c * h * w];
    let plane = h * w;
    for img in 0..n {
        let fu = &flow[img * 2 * plane..][..plane];
        let fv = &flow[img * 2 * plane + plane..][..plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let s = site(
                    x as f64 + fu[p].to_f64(),
                    y as f64 + fv[p].to_f64(),
                    h,
                    w,
                );
                let (wx, wy) = (E::from_f64(s.wx), E::from_f64(s.wy));
                let (owx, owy) = (E::ONE - wx, E::ONE - wy);
                for ch in 0..c {
                    let ic = &image[(img * c + ch) * plane..][..plane];
                    let v00 = ic[s.y0 * w + s.x0];
                    let v01 = ic[s.y0 * w + s.x1];
                    let v10 = ic[s.y1 * w + s.x0];
                    let v11 = ic[s.y1 * w + s.x1];
                    out[(img * c + ch) * plane + p] =
                        owy * (owx * v00 + wx * v01) + wy * (owx * v10 + wx * v11);
                }
            }
        }
    }
    out
}

/// Backward warp: gradients with respect to the image and the flow.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_warp_bwd<E: Scalar>(
    image: &[E],
    flow: &[E],
    gout: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    need_image_grad: bool,
    need_flow_grad: bool,
) -> (Vec<E>, Vec<E>) {
    let plane = h * w;
    let mut gimg = vec![E::ZERO; if need_image_grad { n * c * plane } else { 0 }];
    let mut gflow = vec![E::ZERO; if need_flow_grad { n * 2 * plane } else { 0 }];
    for img in 0..n {
        let fu = &flow[img * 2 * plane..][..plane];
        let fv = &flow[img * 2 * plane + plane..][..plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let s = site(
                    x as f64 + fu[p].to_f64(),
                    y as f64 + fv[p].to_f64(),
                    h,
                    w,
                );
                let (wx, wy) = (E::from_f64(s.wx), E::from_f64(s.wy));
                let (owx, owy) = (E::ONE - wx, E::ONE - wy);
                let mut du = E::ZERO;
                let mut dv = E::ZERO;
                for ch in 0..c {
                    let ic = &image[(img * c + ch) * plane..][..plane];
                    let g = gout[(img * c + ch) * plane + p];
                    let v00 = ic[s.y0 * w + s.x0];
                    let v01 = ic[s.y0 * w + s.x1];
                    let v10 = ic[s.y1 * w + s.x0];
                    let v11 = ic[s.y1 * w + s.x1];
                    if need_image_grad {
                        let gi = &mut gimg[(img * c + ch) * plane..][..plane];
                        gi[s.y0 * w + s.x0] += g * owy * owx;
                        gi[s.y0 * w + s.x1] += g * owy * wx;
                        gi[s.y1 * w + s.x0] += g * wy * owx;
                        gi[s.y1 * w + s.x1] += g * wy * wx;
                    }
                    if need_flow_grad {
                        du += g * (owy * (v01 - v00) + wy * (v11 - v10));
                        dv += g * (owx * (v10 - v00) + wx * (v11 - v01));
                    }
                }
                if need_flow_grad {
                    if !s.clamped_x {
                        gflow[img * 2 * plane + p] = du;
                    }
                    if !s.clamped_y {
                        gflow[img * 2 * plane + plane + p] = dv;
                    }
                }
            }
        }
    }
    (gimg, gflow)
}
