//! Finite-difference verification of analytic gradients.
//!
//! Checks run in float64 with central differences; failure is reported as
//! data, not raised as an error. Operators with kinks (leaky ReLU at 0,
//! maxpool ties, bilinear sampling at integer offsets) must be probed at
//! points bounded away from the kink by the caller.

use crate::error::Result;
use crate::rng::StreamRng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Outcome for one checked input tensor.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub input_index: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Outcome of one gradcheck run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub tol: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare the analytic gradient of a scalar-valued tensor function against
/// central finite differences with the given step.
pub fn gradcheck<F>(
    name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    tol: f64,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // analytic pass
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    assert!(tape.value(out).is_scalar(), "gradcheck target must be scalar");
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("populated grad").data().to_vec())
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut reports = Vec::new();
    for (idx, input) in inputs.iter().enumerate() {
        let mut max_err = 0f64;
        for elem in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[elem] += step;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[elem] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic[idx][elem], numeric));
        }
        reports.push(InputReport {
            input_index: idx,
            max_rel_err: max_err,
            pass: max_err <= tol,
        });
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        tol,
        inputs: reports,
    })
}

fn rand_tensor(shape: &[usize], rng: &mut StreamRng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_in(lo, hi))
}

/// Tensor of values bounded away from zero by `margin` (for kinked ops).
fn rand_tensor_off_kink(shape: &[usize], rng: &mut StreamRng, margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        sign * rng.uniform_in(margin, 1.0)
    })
}

/// Run the finite-difference suite over every differentiable primitive and
/// the Charbonnier/warp compositions. Tolerance 1e-4, step 1e-5.
pub fn run_primitive_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let tol = 1e-4;
    let step = 1e-5;
    let mut rng = StreamRng::new(seed);
    let mut out = Vec::new();

    // conv2d w.r.t. input, weight, bias
    let x = rand_tensor(&[1, 3, 5, 5], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[2, 3, 3, 3], &mut rng, -0.5, 0.5);
    let b = rand_tensor(&[2], &mut rng, -0.5, 0.5);
    out.push(gradcheck(
        "conv2d",
        |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            Ok(t.mean(c))
        },
        &[x, w, b],
        tol,
        step,
    )?);

    // strided conv2d
    let x = rand_tensor(&[2, 2, 6, 6], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng, -0.5, 0.5);
    let b = rand_tensor(&[3], &mut rng, -0.5, 0.5);
    out.push(gradcheck(
        "conv2d_stride2",
        |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            let sq = t.mul(c, c)?;
            Ok(t.mean(sq))
        },
        &[x, w, b],
        tol,
        step,
    )?);

    // conv_transpose2d (the transition-up geometry: stride 2, pad 1, opad 1)
    let x = rand_tensor(&[1, 2, 4, 4], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[2, 3, 3, 3], &mut rng, -0.5, 0.5);
    let b = rand_tensor(&[3], &mut rng, -0.5, 0.5);
    out.push(gradcheck(
        "conv_transpose2d",
        |t, v| {
            let c = t.conv_transpose2d(v[0], v[1], v[2], 2, 1, 1)?;
            let sq = t.mul(c, c)?;
            Ok(t.mean(sq))
        },
        &[x, w, b],
        tol,
        step,
    )?);

    // maxpool away from ties: distinct values guaranteed by construction
    let x = Tensor::from_fn(vec![1, 2, 6, 6], |i| (i as f64) * 0.13 + ((i * 29 % 7) as f64) * 0.011);
    out.push(gradcheck(
        "maxpool2d",
        |t, v| {
            let p = t.maxpool2d(v[0], 2, 2)?;
            let sq = t.mul(p, p)?;
            Ok(t.mean(sq))
        },
        &[x],
        tol,
        step,
    )?);

    // avgpool
    let x = rand_tensor(&[1, 2, 4, 4], &mut rng, -1.0, 1.0);
    out.push(gradcheck(
        "avgpool2d",
        |t, v| {
            let p = t.avgpool2d(v[0], 2)?;
            let sq = t.mul(p, p)?;
            Ok(t.mean(sq))
        },
        &[x],
        tol,
        step,
    )?);

    // batch norm, train mode, w.r.t. input / gamma / beta
    let x = rand_tensor(&[2, 2, 4, 4], &mut rng, -1.0, 1.0);
    let g = rand_tensor(&[2], &mut rng, 0.5, 1.5);
    let bt = rand_tensor(&[2], &mut rng, -0.5, 0.5);
    out.push(gradcheck(
        "batch_norm_train",
        |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], &[0.0; 2], &[1.0; 2], 1e-5, Mode::Train)?;
            let sq = t.mul(y, y)?;
            Ok(t.mean(sq))
        },
        &[x.clone(), g.clone(), bt.clone()],
        tol,
        step,
    )?);
    out.push(gradcheck(
        "batch_norm_eval",
        |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], &[0.1, -0.2], &[0.8, 1.3], 1e-5, Mode::Eval)?;
            let sq = t.mul(y, y)?;
            Ok(t.mean(sq))
        },
        &[x, g, bt],
        tol,
        step,
    )?);

    // leaky relu bounded away from the kink at 0
    let x = rand_tensor_off_kink(&[3, 7], &mut rng, 1e-3);
    out.push(gradcheck(
        "leaky_relu",
        |t, v| {
            let y = t.leaky_relu(v[0], 0.1)?;
            Ok(t.mean(y))
        },
        &[x],
        tol,
        step,
    )?);

    // dropout: the mask is a pure function of the fixed seed, so finite
    // differences see a fixed linear map
    let x = rand_tensor(&[64], &mut rng, -1.0, 1.0);
    out.push(gradcheck(
        "dropout",
        |t, v| {
            let mut r = StreamRng::new(1234);
            let y = t.dropout(v[0], 0.3, Mode::Train, &mut r)?;
            let sq = t.mul(y, y)?;
            Ok(t.mean(sq))
        },
        &[x],
        tol,
        step,
    )?);

    // concat + slice
    let a = rand_tensor(&[1, 3, 3, 3], &mut rng, -1.0, 1.0);
    let bten = rand_tensor(&[1, 2, 3, 3], &mut rng, -1.0, 1.0);
    out.push(gradcheck(
        "concat_slice",
        |t, v| {
            let cat = t.concat(&[v[0], v[1]])?;
            let s = t.slice_channels(cat, 2, 2)?;
            let sq = t.mul(s, s)?;
            Ok(t.mean(sq))
        },
        &[a, bten],
        tol,
        step,
    )?);

    // elementwise suite
    let a = rand_tensor(&[11], &mut rng, -1.0, 1.0);
    let b2 = rand_tensor(&[11], &mut rng, -1.0, 1.0);
    out.push(gradcheck(
        "elementwise",
        |t, v| {
            let s = t.sub(v[0], v[1])?;
            let m = t.mul(s, v[0])?;
            let p = t.add(m, v[1])?;
            let sc = t.mul_scalar(p, 0.7);
            let sh = t.add_scalar(sc, 0.3);
            let sq = t.mul(sh, sh)?;
            Ok(t.mean(sq))
        },
        &[a, b2],
        tol,
        step,
    )?);

    // generalized Charbonnier composed with sub, paper constants, away from 0
    let a = rand_tensor_off_kink(&[9], &mut rng, 0.05);
    let zero = Tensor::zeros(vec![9]);
    out.push(gradcheck(
        "charbonnier_sub",
        |t, v| {
            let d = t.sub(v[0], v[1])?;
            let sq = t.mul(d, d)?;
            let shifted = t.add_scalar(sq, 1e-6);
            let rho = t.pow_scalar(shifted, 0.25);
            Ok(t.mean(rho))
        },
        &[a, zero],
        tol,
        step,
    )?);

    // bilinear warp w.r.t. image and flow, fractional flow away from
    // integer offsets, loss restricted to the interior so border clamping
    // never enters
    let h = 6;
    let img = rand_tensor(&[1, 2, h, h], &mut rng, 0.0, 1.0);
    let flow = Tensor::from_fn(vec![1, 2, h, h], |_| {
        let s = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        s * rng.uniform_in(0.2, 0.8)
    });
    let mut interior = Tensor::zeros(vec![1, 2, h, h]);
    for c in 0..2 {
        for y in 2..h - 2 {
            for x in 2..h - 2 {
                interior.data_mut()[(c * h + y) * h + x] = 1.0;
            }
        }
    }
    out.push(gradcheck(
        "bilinear_warp",
        |t, v| {
            let warped = t.bilinear_warp(v[0], v[1])?;
            let mask = t.constant(interior.clone());
            let masked = t.mul(warped, mask)?;
            let sq = t.mul(masked, masked)?;
            Ok(t.mean(sq))
        },
        &[img, flow],
        tol,
        step,
    )?);

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_gradcheck_is_tight() {
        let x = Tensor::from_fn(vec![8], |i| (i as f64) * 0.3 - 1.0);
        let r = gradcheck("mean", |t, v| Ok(t.mean(v[0])), &[x], 1e-9, 1e-5).unwrap();
        assert!(r.passed(), "max err {}", r.max_rel_err());
        assert!(r.max_rel_err() < 1e-9);
    }

    #[test]
    fn primitive_suite_passes() {
        let reports = run_primitive_suite(20240801).unwrap();
        for r in &reports {
            assert!(r.passed(), "{} failed: max rel err {}", r.name, r.max_rel_err());
        }
    }
}
