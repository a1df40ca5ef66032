//! Per-pixel displacement fields.

use crate::error::{Error, Result};

/// A dense 2-D flow field. `u` is the horizontal displacement in pixels
/// (positive = rightward, column axis), `v` the vertical (positive =
/// downward, row axis). Row-major, height x width.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "flow field {width}x{height} needs {} values per component, got u={} v={}",
                width * height,
                u.len(),
                v.len()
            )));
        }
        Ok(FlowField { width, height, u, v })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        FlowField {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    /// Largest vector magnitude in the field.
    pub fn max_magnitude(&self) -> f32 {
        self.u
            .iter()
            .zip(self.v.iter())
            .map(|(&u, &v)| (u * u + v * v).sqrt())
            .fold(0.0, f32::max)
    }

    /// Flatten into the [2, H, W] tensor layout used by the network
    /// (channel 0 = u, channel 1 = v).
    pub fn to_channels(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(2 * self.len());
        out.extend_from_slice(&self.u);
        out.extend_from_slice(&self.v);
        out
    }

    /// Inverse of `to_channels`.
    pub fn from_channels(width: usize, height: usize, data: &[f32]) -> Result<Self> {
        if data.len() != 2 * width * height {
            return Err(Error::InvalidArgument(format!(
                "expected {} channel values for {width}x{height} flow, got {}",
                2 * width * height,
                data.len()
            )));
        }
        let plane = width * height;
        FlowField::new(width, height, data[..plane].to_vec(), data[plane..].to_vec())
    }
}
