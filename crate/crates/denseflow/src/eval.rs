//! Endpoint-error evaluation.

use crate::data::FlowSample;
use crate::error::{Error, Result};
use crate::flow::FlowField;

/// Per-sample endpoint error: mean over that sample's counted pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEpe {
    pub id: usize,
    pub pixels: usize,
    pub epe: f64,
}

/// Aggregated endpoint error; the mean pools pixels across samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EpeReport {
    pub mean_epe: f64,
    pub pixel_count: usize,
    pub samples: Vec<SampleEpe>,
}

impl EpeReport {
    pub fn from_samples(samples: Vec<SampleEpe>) -> Result<EpeReport> {
        let pixel_count: usize = samples.iter().map(|s| s.pixels).sum();
        if pixel_count == 0 {
            return Err(Error::InvalidArgument(
                "evaluation covered zero pixels".into(),
            ));
        }
        let sum: f64 = samples.iter().map(|s| s.epe * s.pixels as f64).sum();
        Ok(EpeReport {
            mean_epe: sum / pixel_count as f64,
            pixel_count,
            samples,
        })
    }

    /// Aligned text table, one row per sample, totals in the footer.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:>8} {:>10} {:>12}\n", "sample", "pixels", "epe"));
        for s in &self.samples {
            out.push_str(&format!("{:>8} {:>10} {:>12.6}\n", s.id, s.pixels, s.epe));
        }
        out.push_str(&format!(
            "{:>8} {:>10} {:>12.6}\n",
            "total", self.pixel_count, self.mean_epe
        ));
        out
    }
}

fn epe_sum(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<(f64, usize)> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::shape(
            "flow fields must share extents",
            &[pred.height, pred.width],
            &[gt.height, gt.width],
        ));
    }
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(Error::InvalidArgument(format!(
                "mask length {} does not cover {} pixels",
                m.len(),
                gt.len()
            )));
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for p in 0..gt.len() {
        if let Some(m) = mask {
            if !m[p] {
                continue;
            }
        }
        let du = (pred.u[p] - gt.u[p]) as f64;
        let dv = (pred.v[p] - gt.v[p]) as f64;
        sum += (du * du + dv * dv).sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "mask excludes every pixel".into(),
        ));
    }
    Ok((sum, count))
}

/// Mean endpoint error of one prediction; the mask, when present, restricts
/// the mean to valid pixels and must keep at least one.
pub fn epe(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<EpeReport> {
    let (sum, count) = epe_sum(pred, gt, mask)?;
    EpeReport::from_samples(vec![SampleEpe {
        id: 0,
        pixels: count,
        epe: sum / count as f64,
    }])
}

/// EPE of the identically-zero predictor over every sample with ground
/// truth: the mean ground-truth flow magnitude.
pub fn zero_flow_baseline(dataset: &[FlowSample]) -> Result<EpeReport> {
    let mut samples = Vec::new();
    for (id, s) in dataset.iter().enumerate() {
        let gt = s.gt_flow.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("sample {id} has no ground-truth flow"))
        })?;
        let zero = FlowField::zeros(gt.width, gt.height);
        let (sum, count) = epe_sum(&zero, gt, s.valid_mask.as_deref())?;
        samples.push(SampleEpe {
            id,
            pixels: count,
            epe: sum / count as f64,
        });
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    EpeReport::from_samples(samples)
}
