//! Max and average pooling.

use crate::tensor::Scalar;

/// Per-window maximum over an [n, c, h, w] buffer. Returns the pooled buffer
/// and, per output element, the flat input index of the winning position.
/// Ties go to the lowest linear index so backward is deterministic.
pub fn maxpool2d_fwd<E: Scalar>(
    x: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<E>, Vec<usize>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![E::ZERO; n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = x[base + oy * stride * w + ox * stride];
                    let mut best_idx = base + oy * stride * w + ox * stride;
                    for i in 0..window {
                        for j in 0..window {
                            let idx = base + (oy * stride + i) * w + ox * stride + j;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((img * c + ch) * oh + oy) * ow + ox;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    (out, arg, oh, ow)
}

/// Routes each output gradient to its recorded argmax position.
pub fn maxpool2d_bwd<E: Scalar>(gout: &[E], arg: &[usize], input_len: usize) -> Vec<E> {
    let mut gin = vec![E::ZERO; input_len];
    for (g, &idx) in gout.iter().zip(arg.iter()) {
        gin[idx] += *g;
    }
    gin
}

/// Per-window arithmetic mean; window == stride. H and W must be divisible
/// by the window (checked by the caller).
pub fn avgpool2d_fwd<E: Scalar>(
    x: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> Vec<E> {
    let oh = h / window;
    let ow = w / window;
    let inv = E::from_f64(1.0 / (window * window) as f64);
    let mut out = vec![E::ZERO; n * c * oh * ow];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = E::ZERO;
                    for i in 0..window {
                        for j in 0..window {
                            acc += x[base + (oy * window + i) * w + ox * window + j];
                        }
                    }
                    out[((img * c + ch) * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
    }
    out
}

/// Spreads each output gradient uniformly over its window.
pub fn avgpool2d_bwd<E: Scalar>(
    gout: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> Vec<E> {
    let oh = h / window;
    let ow = w / window;
    let inv = E::from_f64(1.0 / (window * window) as f64);
    let mut gin = vec![E::ZERO; n * c * h * w];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout[((img * c + ch) * oh + oy) * ow + ox] * inv;
                    for i in 0..window {
                        for j in 0..window {
                            gin[base + (oy * window + i) * w + ox * window + j] += g;
                        }
                    }
                }
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_of_single_window() {
        let (out, _, oh, ow) = maxpool2d_fwd(&[1.0f32, 2.0, 3.0, 4.0], 1, 1, 2, 2, 2, 2);
        assert_eq!((oh, ow), (1, 1));
        assert_eq!(out, vec![4.0]);
    }

    #[test]
    fn constant_input_ties_route_to_first_index() {
        let x = [5.0f32; 16];
        let (out, arg, _, _) = maxpool2d_fwd(&x, 1, 1, 4, 4, 2, 2);
        assert_eq!(out, vec![5.0; 4]);
        // winner is the top-left corner of each window
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let gin = maxpool2d_bwd(&[1.0f32; 4], &arg, 16);
        assert_eq!(gin.iter().filter(|&&g| g != 0.0).count(), 4);
    }

    #[test]
    fn random_matches_window_loop_oracle() {
        let mut s = 3u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x: Vec<f64> = (0..2 * 36).map(|_| next()).collect();
        let (out, _, oh, ow) = maxpool2d_fwd(&x, 1, 2, 6, 6, 2, 2);
        assert_eq!((oh, ow), (3, 3));
        for ch in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..2 {
                        for j in 0..2 {
                            m = m.max(x[ch * 36 + (oy * 2 + i) * 6 + ox * 2 + j]);
                        }
                    }
                    assert_eq!(out[(ch * 3 + oy) * 3 + ox], m);
                }
            }
        }
    }

    #[test]
    fn avgpool_mean_of_block() {
        let out = avgpool2d_fwd(&[1.0f64, 2.0, 3.0, 4.0], 1, 1, 2, 2, 2);
        assert_eq!(out, vec![2.5]);
    }

    #[test]
    fn avgpool_preserves_global_mean() {
        let mut s = 11u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x: Vec<f64> = (0..3 * 64).map(|_| next()).collect();
        let out = avgpool2d_fwd(&x, 1, 3, 8, 8, 2);
        let m_in: f64 = x.iter().sum::<f64>() / x.len() as f64;
        let m_out: f64 = out.iter().sum::<f64>() / out.len() as f64;
        assert!((m_in - m_out).abs() < 1e-12);
    }
}
