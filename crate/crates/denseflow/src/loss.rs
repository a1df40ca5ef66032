//! Photometric reconstruction objective.
//!
//! The network is scored by how well frame 2, inverse-warped by the
//! predicted flow, reproduces frame 1: a generalized Charbonnier penalty on
//! the per-pixel difference, averaged over all elements, evaluated at every
//! pyramid level and combined with per-level weights.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Generalized Charbonnier penalty rho(x) = (x^2 + epsilon^2)^alpha.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CharbonnierParams {
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for CharbonnierParams {
    fn default() -> Self {
        CharbonnierParams {
            alpha: 0.25,
            epsilon: 0.001,
        }
    }
}

impl CharbonnierParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "charbonnier parameters must be positive, got alpha {} epsilon {}",
                self.alpha, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-level loss weights, coarsest first.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub weights: Vec<f64>,
}

impl LossWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        Ok(LossWeights { weights })
    }

    /// Finest level 0.01, doubling per coarser level, with the coarsest
    /// doubled once more; 5 levels give [0.32, 0.08, 0.04, 0.02, 0.01].
    pub fn default_for(levels: usize) -> Self {
        let mut w: Vec<f64> = (0..levels)
            .map(|i| 0.01 * f64::powi(2.0, (levels - 1 - i) as i32))
            .collect();
        if let Some(first) = w.first_mut() {
            *first *= 2.0;
        }
        LossWeights { weights: w }
    }
}

/// Scalar Charbonnier, for oracles and reporting.
pub fn charbonnier_value(x: f64, p: &CharbonnierParams) -> f64 {
    (x * x + p.epsilon * p.epsilon).powf(p.alpha)
}

/// Elementwise Charbonnier on the tape.
pub fn charbonnier<E: Scalar>(tape: &mut Tape<E>, x: Var, p: &CharbonnierParams) -> Result<Var> {
    p.validate()?;
    let sq = tape.mul(x, x)?;
    let shifted = tape.add_scalar(sq, p.epsilon * p.epsilon);
    Ok(tape.pow_scalar(shifted, p.alpha))
}

/// Mean Charbonnier penalty of the difference between a frame and its
/// reconstruction, averaged over all elements.
pub fn reconstruction_loss<E: Scalar>(
    tape: &mut Tape<E>,
    i1: Var,
    reconstruction: Var,
    p: &CharbonnierParams,
) -> Result<Var> {
    let diff = tape.sub(i1, reconstruction)?;
    let rho = charbonnier(tape, diff, p)?;
    Ok(tape.mean(rho))
}

/// Downsample by repeated 2x2 average pooling. Coarsest first; the finest
/// level is the input itself.
pub fn image_pyramid<E: Scalar>(tape: &mut Tape<E>, image: Var, levels: usize) -> Result<Vec<Var>> {
    if levels < 1 {
        return Err(Error::InvalidArgument("pyramid needs at least 1 level".into()));
    }
    let (_, _, h, w) = tape.value(image).dims4()?;
    let div = 1usize << (levels - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::InvalidArgument(format!(
            "image extent {h}x{w} must be divisible by {div} for {levels} pyramid levels"
        )));
    }
    let mut out = vec![image];
    for _ in 1..levels {
        let prev = *out.last().unwrap();
        out.push(tape.avgpool2d(prev, 2)?);
    }
    out.reverse();
    Ok(out)
}

/// The combined objective and its per-level breakdown.
pub struct MultiscaleLoss {
    pub total: Var,
    /// Unweighted reconstruction loss per level, coarsest first.
    pub per_scale: Vec<f64>,
}

/// Weighted sum over pyramid levels of the reconstruction loss between
/// frame 1 and frame 2 warped by that level's flow. Flows coarsest first,
/// finest at the resolution of `i1`/`i2`.
pub fn multiscale_loss<E: Scalar>(
    tape: &mut Tape<E>,
    flows: &[Var],
    i1: Var,
    i2: Var,
    w: &LossWeights,
    p: &CharbonnierParams,
) -> Result<MultiscaleLoss> {
    if flows.len() != w.weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} pyramid levels but {} loss weights",
            flows.len(),
            w.weights.len()
        )));
    }
    let p1 = image_pyramid(tape, i1, flows.len())?;
    let p2 = image_pyramid(tape, i2, flows.len())?;
    let mut total = None;
    let mut per_scale = Vec::with_capacity(flows.len());
    for (level, &flow) in flows.iter().enumerate() {
        let fs = tape.value(flow).shape().to_vec();
        let is = tape.value(p1[level]).shape().to_vec();
        if fs[2] != is[2] || fs[3] != is[3] {
            return Err(Error::shape(
                format!("pyramid level {level} flow does not match image extent"),
                &fs,
                &is,
            ));
        }
        let warped = tape.bilinear_warp(p2[level], flow)?;
        let rec = reconstruction_loss(tape, p1[level], warped, p)?;
        per_scale.push(tape.value(rec).item().to_f64());
        let weighted = tape.mul_scalar(rec, w.weights[level]);
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    Ok(MultiscaleLoss {
        total: total.expect("at least one level"),
        per_scale,
    })
}
