//! Training loop: Adam, the halving learning-rate schedule, augmentation,
//! checkpointing, and per-iteration logging.
//!
//! Everything random is a pure function of (seed, iteration), so resuming
//! from a checkpoint reproduces the uninterrupted trajectory bit-exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::FlowSample;
use crate::error::{Error, Result};
use crate::eval;
use crate::flow::FlowField;
use crate::loss::{multiscale_loss, CharbonnierParams, LossWeights};
use crate::net::{Network, NetworkConfig};
use crate::rng::StreamRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"DFLW";

// ---- optimizer ------------------------------------------------------------

/// First and second moments per parameter, in `visit_params` order.
pub struct AdamState {
    pub t: u64,
    pub moments: Vec<(String, Tensor<f32>, Tensor<f32>)>,
}

impl AdamState {
    pub fn new(net: &Network) -> AdamState {
        let mut moments = Vec::new();
        net.visit_params(&mut |name, t| {
            moments.push((
                name.to_string(),
                Tensor::zeros(t.shape().to_vec()),
                Tensor::zeros(t.shape().to_vec()),
            ));
        });
        AdamState { t: 0, moments }
    }
}

/// base_lr halved once per `halve_every` iterations, stepwise.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * 0.5f64.powi((iter / cfg.halve_every) as i32)
}

/// One bias-corrected Adam update over all parameters. `grads` must cover
/// the parameter list in `visit_params` order.
pub fn adam_step(
    net: &mut Network,
    grads: &[(String, Tensor<f32>)],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let mut idx = 0usize;
    let mut failure: Option<Error> = None;
    let moments = &mut state.moments;
    net.visit_params_mut(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        let grad = match grads.get(idx) {
            Some((gname, g)) if gname == name && g.shape() == p.shape() => g,
            _ => {
                failure = Some(Error::MissingGradient(name.to_string()));
                return;
            }
        };
        let (mname, m, v) = &mut moments[idx];
        debug_assert_eq!(mname, name);
        let (md, vd) = (m.data_mut(), v.data_mut());
        for ((pe, &ge), (me, ve)) in p
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(md.iter_mut().zip(vd.iter_mut()))
        {
            let g = ge as f64;
            let mn = ADAM_BETA1 * *me as f64 + (1.0 - ADAM_BETA1) * g;
            let vn = ADAM_BETA2 * *ve as f64 + (1.0 - ADAM_BETA2) * g * g;
            *me = mn as f32;
            *ve = vn as f32;
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
            *pe -= update as f32;
        }
        idx += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if idx != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients supplied for {idx} parameters",
            grads.len()
        )));
    }
    Ok(())
}

// ---- augmentation ---------------------------------------------------------

/// Individually toggleable augmentations. Geometric transforms always apply
/// identically to both frames; photometric ones differ per frame only when
/// `asymmetric_photometric` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    pub crop: Option<usize>,
    pub brightness: Option<(f64, f64)>,
    pub contrast: Option<(f64, f64)>,
    pub color: Option<(f64, f64)>,
    pub noise_sigma: f64,
    pub asymmetric_photometric: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip_prob: 0.5,
            crop: None,
            brightness: Some((0.8, 1.2)),
            contrast: Some((0.8, 1.2)),
            color: Some((0.9, 1.1)),
            noise_sigma: 0.01,
            asymmetric_photometric: false,
        }
    }
}

impl AugmentationConfig {
    pub fn none() -> Self {
        AugmentationConfig {
            flip_prob: 0.0,
            crop: None,
            brightness: None,
            contrast: None,
            color: None,
            noise_sigma: 0.0,
            asymmetric_photometric: false,
        }
    }
}

fn frame_dims(t: &Tensor<f32>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected a [3, H, W] frame, got {s:?}"
        )));
    }
    Ok((s[1], s[2]))
}

fn flip_frame(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        let (y, x) = (rest / w, rest % w);
        t.data()[c * h * w + y * w + (w - 1 - x)]
    })
}

fn crop_frame(t: &Tensor<f32>, h: usize, w: usize, y0: usize, x0: usize, cs: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![3, cs, cs], |i| {
        let (c, rest) = (i / (cs * cs), i % (cs * cs));
        let (y, x) = (rest / cs, rest % cs);
        t.data()[c * h * w + (y0 + y) * w + (x0 + x)]
    })
}

/// Apply the configured augmentations. Ground truth, when present, follows
/// the geometric transforms (flip negates u; crop re-indexes).
pub fn augment(sample: &FlowSample, cfg: &AugmentationConfig, rng: &mut StreamRng) -> Result<FlowSample> {
    let (mut h, mut w) = frame_dims(&sample.frame1)?;
    let mut f1 = sample.frame1.clone();
    let mut f2 = sample.frame2.clone();
    let mut flow = sample.gt_flow.clone();
    let mut mask = sample.valid_mask.clone();

    if cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob) {
        f1 = flip_frame(&f1, h, w);
        f2 = flip_frame(&f2, h, w);
        if let Some(fl) = &mut flow {
            let mut u = vec![0.0f32; h * w];
            let mut v = vec![0.0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    u[y * w + x] = -fl.u[y * w + (w - 1 - x)];
                    v[y * w + x] = fl.v[y * w + (w - 1 - x)];
                }
            }
            *fl = FlowField::new(w, h, u, v)?;
        }
        if let Some(m) = &mut mask {
            let old = m.clone();
            for y in 0..h {
                for x in 0..w {
                    m[y * w + x] = old[y * w + (w - 1 - x)];
                }
            }
        }
    }

    if let Some(cs) = cfg.crop {
        if cs > h || cs > w || cs == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {cs} does not fit a {h}x{w} frame"
            )));
        }
        let y0 = rng.below(h - cs + 1);
        let x0 = rng.below(w - cs + 1);
        f1 = crop_frame(&f1, h, w, y0, x0, cs);
        f2 = crop_frame(&f2, h, w, y0, x0, cs);
        if let Some(fl) = &mut flow {
            let pick = |src: &[f32]| -> Vec<f32> {
                (0..cs * cs)
                    .map(|i| src[(y0 + i / cs) * w + x0 + i % cs])
                    .collect()
            };
            *fl = FlowField::new(cs, cs, pick(&fl.u), pick(&fl.v))?;
        }
        if let Some(m) = &mut mask {
            *m = (0..cs * cs)
                .map(|i| m[(y0 + i / cs) * w + x0 + i % cs])
                .collect();
        }
        h = cs;
        w = cs;
    }
    let _ = (h, w);

    // photometric: one draw shared by both frames unless asymmetric
    let photometric = |f1: &mut Tensor<f32>, f2: &mut Tensor<f32>, rng: &mut StreamRng| {
        let plane = f1.numel() / 3;
        let apply = |frame: &mut Tensor<f32>, r: &mut StreamRng| {
            if let Some((lo, hi)) = cfg.brightness {
                let s = r.uniform_in(lo, hi) as f32;
                for v in frame.data_mut() {
                    *v *= s;
                }
            }
            if let Some((lo, hi)) = cfg.contrast {
                let c = r.uniform_in(lo, hi) as f32;
                let mean = frame.data().iter().sum::<f32>() / frame.numel() as f32;
                for v in frame.data_mut() {
                    *v = (*v - mean) * c + mean;
                }
            }
            if let Some((lo, hi)) = cfg.color {
                for ch in 0..3 {
                    let s = r.uniform_in(lo, hi) as f32;
                    for v in &mut frame.data_mut()[ch * plane..][..plane] {
                        *v *= s;
                    }
                }
            }
            if cfg.noise_sigma > 0.0 {
                for v in frame.data_mut() {
                    *v += (r.normal() * cfg.noise_sigma) as f32;
                }
            }
        };
        if cfg.asymmetric_photometric {
            apply(f1, &mut rng.child("photo1"));
            apply(f2, &mut rng.child("photo2"));
        } else {
            apply(f1, &mut rng.child("photo"));
            apply(f2, &mut rng.child("photo"));
        }
        for frame in [f1, f2] {
            for v in frame.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    };
    photometric(&mut f1, &mut f2, rng);

    Ok(FlowSample {
        frame1: f1,
        frame2: f2,
        gt_flow: flow,
        valid_mask: mask,
    })
}

// ---- configuration --------------------------------------------------------

/// Training settings. Defaults are desk-scale (2 000 iterations at 64x64
/// with a higher learning rate); the full-scale recipe (1e-5, halved every
/// 100k, 600k iterations) is expressible through the same fields.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub halve_every: u64,
    pub max_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub augmentation: AugmentationConfig,
    pub loss_weights: Option<LossWeights>,
    pub charbonnier: CharbonnierParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            halve_every: 100_000,
            max_iters: 2_000,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 500,
            eval_every: 0,
            augmentation: AugmentationConfig::default(),
            loss_weights: None,
            charbonnier: CharbonnierParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.halve_every == 0 {
            return Err(Error::Config("halve_every must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.charbonnier.validate()
    }
}

// ---- checkpoints ----------------------------------------------------------

/// FNV-1a over the canonical field listing.
pub fn config_digest(cfg: &NetworkConfig) -> u64 {
    let text = format!(
        "k={} nbd={} nbu={} l={} k0={} drop={} slope={} cin={} levels={}",
        cfg.growth_rate,
        cfg.num_blocks_down,
        cfg.num_blocks_up,
        cfg.layers_per_block,
        cfg.initial_channels,
        cfg.dropout_rate,
        cfg.lrelu_slope,
        cfg.input_channels,
        cfg.flow_levels
    );
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Full resumable training state.
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub iter: u64,
    pub seed: u64,
    pub adam_t: u64,
    /// Parameters ("p:"), Adam moments ("m:", "v:"), BN running statistics
    /// ("bm:", "bv:"), all in deterministic traversal order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn capture(net: &Network, adam: &AdamState, iter: u64, seed: u64) -> Checkpoint {
        let mut tensors = Vec::new();
        net.visit_params(&mut |name, t| tensors.push((format!("p:{name}"), t.clone())));
        for (name, m, v) in &adam.moments {
            tensors.push((format!("m:{name}"), m.clone()));
            tensors.push((format!("v:{name}"), v.clone()));
        }
        net.visit_bn_stats(&mut |name, m, v| {
            tensors.push((format!("bm:{name}"), Tensor::new(vec![m.len()], m.to_vec()).unwrap()));
            tensors.push((format!("bv:{name}"), Tensor::new(vec![v.len()], v.to_vec()).unwrap()));
        });
        Checkpoint {
            config: net.config.clone(),
            iter,
            seed,
            adam_t: adam.t,
            tensors,
        }
    }

    /// Load this state into a network built from the same configuration.
    pub fn apply(&self, net: &mut Network, adam: &mut AdamState) -> Result<()> {
        let found = config_digest(&self.config);
        let expected = config_digest(&net.config);
        if found != expected {
            return Err(Error::ConfigMismatch { found, expected });
        }
        let map: HashMap<&str, &Tensor<f32>> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let mut failure: Option<Error> = None;
        let take = |key: String, dst: &mut Tensor<f32>, failure: &mut Option<Error>| {
            match map.get(key.as_str()) {
                Some(src) if src.shape() == dst.shape() => *dst = (*src).clone(),
                Some(src) => {
                    *failure = Some(Error::shape(
                        format!("checkpoint tensor {key}"),
                        src.shape(),
                        dst.shape(),
                    ))
                }
                None => *failure = Some(Error::CorruptHeader(format!("missing tensor {key}"))),
            }
        };
        net.visit_params_mut(&mut |name, t| {
            if failure.is_none() {
                take(format!("p:{name}"), t, &mut failure);
            }
        });
        for (name, m, v) in &mut adam.moments {
            if failure.is_none() {
                take(format!("m:{name}"), m, &mut failure);
            }
            if failure.is_none() {
                take(format!("v:{name}"), v, &mut failure);
            }
        }
        net.visit_bn_stats_mut(&mut |name, rm, rv| {
            if failure.is_none() {
                if let Some(src) = map.get(format!("bm:{name}").as_str()) {
                    rm.copy_from_slice(src.data());
                } else {
                    failure = Some(Error::CorruptHeader(format!("missing tensor bm:{name}")));
                }
            }
            if failure.is_none() {
                if let Some(src) = map.get(format!("bv:{name}").as_str()) {
                    rv.copy_from_slice(src.data());
                } else {
                    failure = Some(Error::CorruptHeader(format!("missing tensor bv:{name}")));
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        adam.t = self.adam_t;
        Ok(())
    }
}

fn config_fields(cfg: &NetworkConfig) -> [f64; 9] {
    [
        cfg.growth_rate as f64,
        cfg.num_blocks_down as f64,
        cfg.num_blocks_up as f64,
        cfg.layers_per_block as f64,
        cfg.initial_channels as f64,
        cfg.dropout_rate,
        cfg.lrelu_slope,
        cfg.input_channels as f64,
        cfg.flow_levels as f64,
    ]
}

fn config_from_fields(f: &[f64; 9]) -> NetworkConfig {
    NetworkConfig {
        growth_rate: f[0] as usize,
        num_blocks_down: f[1] as usize,
        num_blocks_up: f[2] as usize,
        layers_per_block: f[3] as usize,
        initial_channels: f[4] as usize,
        dropout_rate: f[5],
        lrelu_slope: f[6],
        input_channels: f[7] as usize,
        flow_levels: f[8] as usize,
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(&ckpt.config).to_le_bytes());
    for f in config_fields(&ckpt.config) {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&ckpt.iter.to_le_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.adam_t.to_le_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptHeader(format!(
                "unexpected end of file at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptHeader("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let digest = r.u64()?;
    let mut fields = [0.0f64; 9];
    for f in &mut fields {
        *f = r.f64()?;
    }
    let config = config_from_fields(&fields);
    if config_digest(&config) != digest {
        return Err(Error::CorruptHeader(
            "config digest does not match stored fields".into(),
        ));
    }
    let iter = r.u64()?;
    let seed = r.u64()?;
    let adam_t = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::CorruptHeader("non-utf8 tensor name".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        iter,
        seed,
        adam_t,
        tensors,
    })
}

// ---- the loop -------------------------------------------------------------

pub struct TrainOutput {
    pub lines: Vec<String>,
    pub losses: Vec<f64>,
}

fn stack_frames(frames: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = frames[0].shape().to_vec();
    let mut data = Vec::with_capacity(frames.len() * frames[0].numel());
    for f in frames {
        if f.shape() != first {
            return Err(Error::shape("batch frames must share a shape", f.shape(), &first));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![frames.len(), first[0], first[1], first[2]], data)
}

fn batched(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = t.shape();
    Tensor::new(vec![1, s[0], s[1], s[2]], t.data().to_vec())
}

/// Mean EPE of the finest prediction over a held-out set, eval mode.
pub fn eval_epe(net: &Network, set: &[FlowSample]) -> Result<f64> {
    let mut samples = Vec::new();
    for (id, s) in set.iter().enumerate() {
        let gt = s.gt_flow.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("eval sample {id} has no ground truth"))
        })?;
        let flows = net.forward(&batched(&s.frame1)?, &batched(&s.frame2)?)?;
        let pred = flows.last().unwrap();
        let report = eval::epe(pred, gt, s.valid_mask.as_deref())?;
        samples.push(eval::SampleEpe {
            id,
            pixels: report.pixel_count,
            epe: report.mean_epe,
        });
    }
    Ok(eval::EpeReport::from_samples(samples)?.mean_epe)
}

/// Run iterations `start_iter..cfg.max_iters`. Emits one log line per
/// iteration through `on_line`, checkpoints periodically and on completion.
/// Ground truth in `dataset` is never touched; only `eval_set` reads it.
#[allow(clippy::too_many_arguments)]
pub fn train(
    net: &mut Network,
    adam: &mut AdamState,
    start_iter: u64,
    dataset: &[FlowSample],
    eval_set: Option<&[FlowSample]>,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
    on_line: &mut dyn FnMut(&str),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let weights = match &cfg.loss_weights {
        Some(w) => w.clone(),
        None => LossWeights::default_for(net.config.flow_levels),
    };
    let root = StreamRng::new(cfg.seed);
    let mut lines = Vec::new();
    let mut losses = Vec::new();
    for iter in start_iter..cfg.max_iters {
        let iter_rng = root.child_indexed("iter", iter);
        let mut pick = iter_rng.child("batch");
        let mut f1 = Vec::with_capacity(cfg.batch_size);
        let mut f2 = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            let sample = &dataset[pick.below(dataset.len())];
            let mut aug_rng = iter_rng.child_indexed("aug", slot as u64);
            let aug = augment(sample, &cfg.augmentation, &mut aug_rng)?;
            f1.push(aug.frame1);
            f2.push(aug.frame2);
        }
        let i1 = stack_frames(&f1.iter().collect::<Vec<_>>())?;
        let i2 = stack_frames(&f2.iter().collect::<Vec<_>>())?;
        let mut tape: Tape<f32> = Tape::new();
        let pass = net.forward_train(&mut tape, &i1, &i2, &iter_rng)?;
        let v1 = tape.constant(i1);
        let v2 = tape.constant(i2);
        let ml = multiscale_loss(&mut tape, &pass.flows, v1, v2, &weights, &cfg.charbonnier)?;
        let loss = tape.value(ml.total).item() as f64;
        if !loss.is_finite() || ml.per_scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iter,
                scales: ml.per_scale.iter().map(|&s| s as f32).collect(),
            });
        }
        tape.backward(ml.total)?;
        // reorder from tape usage order into visit_params order for Adam
        let by_name: HashMap<&str, crate::tape::Var> = pass
            .params
            .iter()
            .map(|(n, v)| (n.as_str(), *v))
            .collect();
        let mut grads = Vec::with_capacity(pass.params.len());
        let mut missing = None;
        net.visit_params(&mut |name, _| {
            if missing.is_some() {
                return;
            }
            match by_name.get(name).and_then(|v| tape.grad(*v)) {
                Some(g) => grads.push((name.to_string(), g.clone())),
                None => missing = Some(name.to_string()),
            }
        });
        if let Some(name) = missing {
            return Err(Error::MissingGradient(name));
        }
        drop(tape);
        let lr = lr_at(iter, cfg);
        adam_step(net, &grads, adam, lr)?;
        let scales = ml
            .per_scale
            .iter()
            .map(|s| format!("{s:.6}"))
            .collect::<Vec<_>>()
            .join(",");
        let mut line = format!("iter {iter} lr {lr:e} loss {loss:.6} scales {scales}");
        if let (Some(set), true) = (
            eval_set,
            cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0,
        ) {
            line.push_str(&format!(" epe {:.6}", eval_epe(net, set)?));
        }
        on_line(&line);
        lines.push(line);
        losses.push(loss);
        if let Some(path) = checkpoint_path {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(path, &Checkpoint::capture(net, adam, iter + 1, cfg.seed))?;
            }
        }
    }
    if let Some(path) = checkpoint_path {
        save_checkpoint(path, &Checkpoint::capture(net, adam, cfg.max_iters, cfg.seed))?;
    }
    Ok(TrainOutput { lines, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_toy_pair, ToyConfig};
    use crate::loss::charbonnier_value;
    use tempfile::tempdir;

    fn paper_schedule() -> TrainConfig {
        TrainConfig {
            base_lr: 1e-5,
            halve_every: 100_000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_matches_published_boundaries() {
        let cfg = paper_schedule();
        assert_eq!(lr_at(0, &cfg), 1e-5);
        assert_eq!(lr_at(99_999, &cfg), 1e-5);
        assert_eq!(lr_at(100_000, &cfg), 5e-6);
        assert_eq!(lr_at(250_000, &cfg), 2.5e-6);
    }

    #[test]
    fn lr_schedule_is_non_increasing_stepwise() {
        let cfg = TrainConfig {
            base_lr: 1.0,
            halve_every: 10,
            ..TrainConfig::default()
        };
        let mut prev = f64::MAX;
        for i in 0..50 {
            let lr = lr_at(i, &cfg);
            assert!(lr <= prev);
            if i % 10 != 0 {
                assert_eq!(lr, lr_at(i - 1, &cfg), "jump away from a boundary at {i}");
            }
            prev = lr;
        }
    }

    fn tiny_net() -> Network {
        let cfg = NetworkConfig {
            growth_rate: 4,
            num_blocks_down: 2,
            num_blocks_up: 2,
            layers_per_block: 1,
            initial_channels: 8,
            dropout_rate: 0.0,
            flow_levels: 3,
            ..NetworkConfig::default()
        };
        Network::build(&cfg, 1).unwrap()
    }

    fn grads_like(net: &Network, value: f32) -> Vec<(String, Tensor<f32>)> {
        let mut g = Vec::new();
        net.visit_params(&mut |name, t| {
            g.push((name.to_string(), Tensor::full(t.shape().to_vec(), value)));
        });
        g
    }

    #[test]
    fn first_adam_step_moves_by_about_lr() {
        let mut net = tiny_net();
        let mut state = AdamState::new(&net);
        let mut before = Vec::new();
        net.visit_params(&mut |_, t| before.extend_from_slice(t.data()));
        let g = grads_like(&net, 0.37);
        adam_step(&mut net, &g, &mut state, 0.01).unwrap();
        let mut after = Vec::new();
        net.visit_params(&mut |_, t| after.extend_from_slice(t.data()));
        for (b, a) in before.iter().zip(&after) {
            let step = (b - a) as f64;
            assert!((step - 0.01).abs() < 1e-4, "step {step}");
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_with_zero_moments_is_a_no_op() {
        let mut net = tiny_net();
        let mut state = AdamState::new(&net);
        let mut before = Vec::new();
        net.visit_params(&mut |_, t| before.extend_from_slice(t.data()));
        let g = grads_like(&net, 0.0);
        adam_step(&mut net, &g, &mut state, 0.01).unwrap();
        let mut after = Vec::new();
        net.visit_params(&mut |_, t| after.extend_from_slice(t.data()));
        assert_eq!(before, after);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut net = tiny_net();
        let mut state = AdamState::new(&net);
        let mut grads = grads_like(&net, 0.1);
        grads.remove(3);
        assert!(matches!(
            adam_step(&mut net, &grads, &mut state, 0.01),
            Err(Error::MissingGradient(_))
        ));
    }

    fn toy_set(n: u64, cfg: &ToyConfig, seed: u64) -> Vec<FlowSample> {
        (0..n)
            .map(|i| gen_toy_pair(cfg, &StreamRng::new(seed).child_indexed("sample", i)).unwrap())
            .collect()
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let s = &toy_set(1, &ToyConfig::default(), 4)[0];
        let out = augment(s, &AugmentationConfig::none(), &mut StreamRng::new(1)).unwrap();
        assert_eq!(out.frame1.data(), s.frame1.data());
        assert_eq!(out.frame2.data(), s.frame2.data());
        assert_eq!(out.gt_flow, s.gt_flow);
    }

    #[test]
    fn flip_negates_u_and_preserves_epe() {
        let s = &toy_set(1, &ToyConfig::default(), 6)[0];
        let cfg = AugmentationConfig {
            flip_prob: 1.0,
            ..AugmentationConfig::none()
        };
        let out = augment(s, &cfg, &mut StreamRng::new(1)).unwrap();
        let gt = s.gt_flow.as_ref().unwrap();
        let fl = out.gt_flow.as_ref().unwrap();
        let w = gt.width;
        for y in 0..gt.height {
            for x in 0..w {
                assert_eq!(fl.u[y * w + x], -gt.u[y * w + (w - 1 - x)]);
                assert_eq!(fl.v[y * w + x], gt.v[y * w + (w - 1 - x)]);
            }
        }
        // flipping prediction and GT together leaves EPE unchanged
        let zero = FlowField::zeros(gt.width, gt.height);
        let a = crate::eval::epe(&zero, gt, s.valid_mask.as_deref()).unwrap();
        let b = crate::eval::epe(&zero, fl, out.valid_mask.as_deref()).unwrap();
        assert!((a.mean_epe - b.mean_epe).abs() < 1e-6);
        // frames flipped identically: warping still consistent at pixel level
        let plane = gt.len();
        assert_eq!(out.frame1.data()[0], s.frame1.data()[w - 1]);
        assert_eq!(out.frame2.data()[plane], s.frame2.data()[plane + w - 1]);
    }

    #[test]
    fn symmetric_brightness_preserves_zero_flow_difference() {
        let s = &toy_set(1, &ToyConfig { max_displacement: 0.0, ..ToyConfig::default() }, 8)[0];
        let cfg = AugmentationConfig {
            brightness: Some((0.8, 1.2)),
            ..AugmentationConfig::none()
        };
        let out = augment(s, &cfg, &mut StreamRng::new(3)).unwrap();
        for (a, b) in out.frame1.data().iter().zip(out.frame2.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn oversized_crop_rejected() {
        let s = &toy_set(1, &ToyConfig::default(), 9)[0];
        let cfg = AugmentationConfig {
            crop: Some(100),
            ..AugmentationConfig::none()
        };
        assert!(augment(s, &cfg, &mut StreamRng::new(1)).is_err());
    }

    #[test]
    fn crop_keeps_frames_flow_and_mask_aligned() {
        let s = &toy_set(1, &ToyConfig::default(), 10)[0];
        let cfg = AugmentationConfig {
            crop: Some(32),
            ..AugmentationConfig::none()
        };
        let out = augment(s, &cfg, &mut StreamRng::new(2)).unwrap();
        assert_eq!(out.frame1.shape(), &[3, 32, 32]);
        let fl = out.gt_flow.as_ref().unwrap();
        assert_eq!((fl.width, fl.height), (32, 32));
        assert_eq!(out.valid_mask.as_ref().unwrap().len(), 32 * 32);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let net = tiny_net();
        let adam = AdamState::new(&net);
        let ckpt = Checkpoint::capture(&net, &adam, 17, 99);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.iter, 17);
        assert_eq!(loaded.seed, 99);
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let dir = tempdir().unwrap();
        let net = tiny_net();
        let ckpt = Checkpoint::capture(&net, &AdamState::new(&net), 0, 0);
        let p = dir.path().join("t.ckpt");
        save_checkpoint(&p, &ckpt).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn version_mismatch_reported() {
        let dir = tempdir().unwrap();
        let net = tiny_net();
        let ckpt = Checkpoint::capture(&net, &AdamState::new(&net), 0, 0);
        let p = dir.path().join("v.ckpt");
        save_checkpoint(&p, &ckpt).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn config_mismatch_names_both_digests() {
        let net = tiny_net();
        let ckpt = Checkpoint::capture(&net, &AdamState::new(&net), 0, 0);
        let mut other = Network::build(&NetworkConfig::desk(), 1).unwrap();
        let mut adam = AdamState::new(&other);
        match ckpt.apply(&mut other, &mut adam) {
            Err(Error::ConfigMismatch { found, expected }) => {
                assert_eq!(found, config_digest(&net.config));
                assert_eq!(expected, config_digest(&other.config));
            }
            other => panic!("expected config mismatch, got {other:?}"),
        }
    }

    fn quick_train_cfg(iters: u64) -> TrainConfig {
        TrainConfig {
            max_iters: iters,
            batch_size: 2,
            checkpoint_every: 0,
            augmentation: AugmentationConfig::none(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn initial_loss_on_identical_frames_is_the_weighted_floor() {
        let toy = ToyConfig {
            size: 32,
            max_displacement: 0.0,
            ..ToyConfig::default()
        };
        let set = toy_set(2, &toy, 12);
        let mut net = Network::build(&NetworkConfig::desk(), 5).unwrap();
        let mut adam = AdamState::new(&net);
        let cfg = quick_train_cfg(1);
        let out = train(&mut net, &mut adam, 0, &set, None, &cfg, None, &mut |_| {}).unwrap();
        let w = LossWeights::default_for(4);
        let expected: f64 = w
            .weights
            .iter()
            .map(|wi| wi * charbonnier_value(0.0, &CharbonnierParams::default()))
            .sum();
        assert!(
            (out.losses[0] - expected).abs() < 1e-6,
            "loss {} expected {expected}",
            out.losses[0]
        );
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trajectory() {
        let dir = tempdir().unwrap();
        let toy = ToyConfig {
            size: 32,
            ..ToyConfig::default()
        };
        let set = toy_set(3, &toy, 13);
        let ncfg = NetworkConfig {
            growth_rate: 4,
            num_blocks_down: 2,
            num_blocks_up: 2,
            layers_per_block: 1,
            initial_channels: 8,
            dropout_rate: 0.1,
            flow_levels: 3,
            ..NetworkConfig::default()
        };
        let cfg = TrainConfig {
            max_iters: 6,
            batch_size: 2,
            checkpoint_every: 3,
            ..TrainConfig::default()
        };
        // uninterrupted run
        let mut net_a = Network::build(&ncfg, 2).unwrap();
        let mut adam_a = AdamState::new(&net_a);
        let full = train(&mut net_a, &mut adam_a, 0, &set, None, &cfg, None, &mut |_| {}).unwrap();
        // interrupted at iteration 3, resumed from the checkpoint
        let ckpt_path = dir.path().join("resume.ckpt");
        let mut net_b = Network::build(&ncfg, 2).unwrap();
        let mut adam_b = AdamState::new(&net_b);
        let half_cfg = TrainConfig {
            max_iters: 3,
            ..cfg.clone()
        };
        let first =
            train(&mut net_b, &mut adam_b, 0, &set, None, &half_cfg, Some(&ckpt_path), &mut |_| {})
                .unwrap();
        let ckpt = load_checkpoint(&ckpt_path).unwrap();
        let mut net_c = Network::build(&ncfg, 2).unwrap();
        let mut adam_c = AdamState::new(&net_c);
        ckpt.apply(&mut net_c, &mut adam_c).unwrap();
        let rest = train(
            &mut net_c,
            &mut adam_c,
            ckpt.iter,
            &set,
            None,
            &cfg,
            None,
            &mut |_| {},
        )
        .unwrap();
        let mut stitched = first.lines.clone();
        stitched.extend(rest.lines.clone());
        assert_eq!(stitched, full.lines);
    }

    #[test]
    fn training_ignores_ground_truth() {
        let toy = ToyConfig {
            size: 32,
            ..ToyConfig::default()
        };
        let mut set = toy_set(2, &toy, 14);
        let cfg = quick_train_cfg(2);
        let mut net_a = Network::build(&NetworkConfig::desk(), 3).unwrap();
        let mut adam_a = AdamState::new(&net_a);
        let a = train(&mut net_a, &mut adam_a, 0, &set, None, &cfg, None, &mut |_| {}).unwrap();
        for s in &mut set {
            s.gt_flow = None;
            s.valid_mask = None;
        }
        let mut net_b = Network::build(&NetworkConfig::desk(), 3).unwrap();
        let mut adam_b = AdamState::new(&net_b);
        let b = train(&mut net_b, &mut adam_b, 0, &set, None, &cfg, None, &mut |_| {}).unwrap();
        assert_eq!(a.lines, b.lines);
        let mut pa = Vec::new();
        net_a.visit_params(&mut |_, t| pa.extend_from_slice(t.data()));
        let mut pb = Vec::new();
        net_b.visit_params(&mut |_, t| pb.extend_from_slice(t.data()));
        assert_eq!(pa, pb);
    }

    #[test]
    fn log_lines_follow_the_record_format() {
        let toy = ToyConfig {
            size: 32,
            ..ToyConfig::default()
        };
        let set = toy_set(2, &toy, 15);
        let mut net = Network::build(&NetworkConfig::desk(), 4).unwrap();
        let mut adam = AdamState::new(&net);
        let cfg = TrainConfig {
            eval_every: 2,
            ..quick_train_cfg(2)
        };
        let out = train(&mut net, &mut adam, 0, &set, Some(&set), &cfg, None, &mut |_| {}).unwrap();
        assert!(out.lines[0].starts_with("iter 0 lr "));
        assert!(out.lines[0].contains(" loss "));
        assert!(out.lines[0].contains(" scales "));
        assert!(!out.lines[0].contains(" epe "));
        assert!(out.lines[1].contains(" epe "));
        let scales = out.lines[0].split(" scales ").nth(1).unwrap();
        assert_eq!(scales.split(' ').next().unwrap().split(',').count(), 4);
    }
}
