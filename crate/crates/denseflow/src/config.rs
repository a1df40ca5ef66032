//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, no sections or nesting.
//! Every key must be claimed by one of the appliers; unclaimed keys are an
//! error so typos never pass silently.

use std::fs;
use std::path::Path;

use crate::data::ToyConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::net::NetworkConfig;
use crate::train::TrainConfig;

/// Parsed assignments in file order.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    pub pairs: Vec<(String, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: empty key or value",
                    lineno + 1
                )));
            }
            pairs.push((key.to_string(), value.to_string()));
        }
        Ok(ConfigFile { pairs })
    }

    pub fn from_path(path: &Path) -> Result<ConfigFile> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        ConfigFile::parse(&text)
    }

    /// Set or replace one assignment, as a CLI override would.
    pub fn set(&mut self, key: &str, value: &str) {
        if let Some(p) = self.pairs.iter_mut().find(|(k, _)| k == key) {
            p.1 = value.to_string();
        } else {
            self.pairs.push((key.to_string(), value.to_string()));
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_range(key: &str, v: &str) -> Result<Option<(f64, f64)>> {
    if v == "none" {
        return Ok(None);
    }
    let (lo, hi) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected `lo,hi` or none, got {v:?}")))?;
    Ok(Some((parse_f64(key, lo.trim())?, parse_f64(key, hi.trim())?)))
}

/// Apply one assignment to the network configuration; `Ok(false)` means the
/// key is not a network key.
pub fn apply_network(cfg: &mut NetworkConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "growth_rate" => cfg.growth_rate = parse_usize(key, value)?,
        "num_blocks_down" => cfg.num_blocks_down = parse_usize(key, value)?,
        "num_blocks_up" => cfg.num_blocks_up = parse_usize(key, value)?,
        "layers_per_block" => cfg.layers_per_block = parse_usize(key, value)?,
        "initial_channels" => cfg.initial_channels = parse_usize(key, value)?,
        "dropout_rate" => cfg.dropout_rate = parse_f64(key, value)?,
        "lrelu_slope" => cfg.lrelu_slope = parse_f64(key, value)?,
        "input_channels" => cfg.input_channels = parse_usize(key, value)?,
        "flow_levels" => cfg.flow_levels = parse_usize(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Apply one assignment to the training configuration (including
/// augmentation, loss weights and Charbonnier parameters).
pub fn apply_train(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "base_lr" => cfg.base_lr = parse_f64(key, value)?,
        "halve_every" => cfg.halve_every = parse_u64(key, value)?,
        "max_iters" => cfg.max_iters = parse_u64(key, value)?,
        "batch_size" => cfg.batch_size = parse_usize(key, value)?,
        "seed" => cfg.seed = parse_u64(key, value)?,
        "checkpoint_every" => cfg.checkpoint_every = parse_u64(key, value)?,
        "eval_every" => cfg.eval_every = parse_u64(key, value)?,
        "loss_weights" => {
            let weights = value
                .split(',')
                .map(|t| parse_f64(key, t.trim()))
                .collect::<Result<Vec<_>>>()?;
            cfg.loss_weights = Some(LossWeights::new(weights)?);
        }
        "charbonnier_alpha" => cfg.charbonnier.alpha = parse_f64(key, value)?,
        "charbonnier_epsilon" => cfg.charbonnier.epsilon = parse_f64(key, value)?,
        "flip_prob" => cfg.augmentation.flip_prob = parse_f64(key, value)?,
        "crop" => {
            cfg.augmentation.crop = match value {
                "none" => None,
                _ => Some(parse_usize(key, value)?),
            }
        }
        "brightness" => cfg.augmentation.brightness = parse_range(key, value)?,
        "contrast" => cfg.augmentation.contrast = parse_range(key, value)?,
        "color" => cfg.augmentation.color = parse_range(key, value)?,
        "noise_sigma" => cfg.augmentation.noise_sigma = parse_f64(key, value)?,
        "asymmetric_photometric" => {
            cfg.augmentation.asymmetric_photometric = parse_bool(key, value)?
        }
        _ => return Ok(false),
    }
    Ok(true)
}

/// Apply one assignment to the toy generator configuration.
pub fn apply_toy(cfg: &mut ToyConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "size" => cfg.size = parse_usize(key, value)?,
        "num_shapes" => cfg.num_shapes = parse_usize(key, value)?,
        "shape_min" => cfg.shape_min = parse_usize(key, value)?,
        "shape_max" => cfg.shape_max = parse_usize(key, value)?,
        "max_displacement" => cfg.max_displacement = parse_f64(key, value)?,
        "texture_smoothing" => cfg.texture_smoothing = parse_usize(key, value)?,
        "integer_displacements" => cfg.integer_displacements = parse_bool(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Echo every effective setting, defaults included, for the run log.
pub fn describe_network(cfg: &NetworkConfig) -> String {
    format!(
        "growth_rate = {}\nnum_blocks_down = {}\nnum_blocks_up = {}\nlayers_per_block = {}\n\
         initial_channels = {}\ndropout_rate = {}\nlrelu_slope = {}\ninput_channels = {}\n\
         flow_levels = {}\n",
        cfg.growth_rate,
        cfg.num_blocks_down,
        cfg.num_blocks_up,
        cfg.layers_per_block,
        cfg.initial_channels,
        cfg.dropout_rate,
        cfg.lrelu_slope,
        cfg.input_channels,
        cfg.flow_levels
    )
}

pub fn describe_train(cfg: &TrainConfig) -> String {
    let range = |r: Option<(f64, f64)>| match r {
        Some((lo, hi)) => format!("{lo},{hi}"),
        None => "none".into(),
    };
    let weights = match &cfg.loss_weights {
        Some(w) => w
            .weights
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(","),
        None => "default".into(),
    };
    format!(
        "base_lr = {}\nhalve_every = {}\nmax_iters = {}\nbatch_size = {}\nseed = {}\n\
         checkpoint_every = {}\neval_every = {}\nloss_weights = {}\ncharbonnier_alpha = {}\n\
         charbonnier_epsilon = {}\nflip_prob = {}\ncrop = {}\nbrightness = {}\ncontrast = {}\n\
         color = {}\nnoise_sigma = {}\nasymmetric_photometric = {}\n",
        cfg.base_lr,
        cfg.halve_every,
        cfg.max_iters,
        cfg.batch_size,
        cfg.seed,
        cfg.checkpoint_every,
        cfg.eval_every,
        weights,
        cfg.charbonnier.alpha,
        cfg.charbonnier.epsilon,
        cfg.augmentation.flip_prob,
        match cfg.augmentation.crop {
            Some(c) => c.to_string(),
            None => "none".into(),
        },
        range(cfg.augmentation.brightness),
        range(cfg.augmentation.contrast),
        range(cfg.augmentation.color),
        cfg.augmentation.noise_sigma,
        cfg.augmentation.asymmetric_photometric
    )
}

pub fn describe_toy(cfg: &ToyConfig) -> String {
    format!(
        "size = {}\nnum_shapes = {}\nshape_min = {}\nshape_max = {}\nmax_displacement = {}\n\
         texture_smoothing = {}\ninteger_displacements = {}\n",
        cfg.size,
        cfg.num_shapes,
        cfg.shape_min,
        cfg.shape_max,
        cfg.max_displacement,
        cfg.texture_smoothing,
        cfg.integer_displacements
    )
}
