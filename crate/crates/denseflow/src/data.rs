//! File formats and the procedural toy dataset.
//!
//! Middlebury .flo and binary PPM/PGM keep the core codec-free; KITTI's
//! 16-bit flow encoding is decoded from already-decompressed pixel data.
//! The toy generator renders textured shapes moving over a textured
//! background with exact ground-truth flow and an occlusion mask.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

const FLO_SENTINEL: f32 = 202021.25;

/// One training or evaluation pair. Frames are [3, H, W] in [0, 1]; the
/// mask, when present, marks pixels whose ground truth is usable.
pub struct FlowSample {
    pub frame1: Tensor<f32>,
    pub frame2: Tensor<f32>,
    pub gt_flow: Option<FlowField>,
    pub valid_mask: Option<Vec<bool>>,
}

// ---- .flo -----------------------------------------------------------------

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    if !flow.all_finite() {
        return Err(Error::InvalidArgument(
            "refusing to write non-finite flow".into(),
        ));
    }
    let mut bytes = Vec::with_capacity(12 + 8 * flow.len());
    bytes.extend_from_slice(&FLO_SENTINEL.to_le_bytes());
    bytes.extend_from_slice(&(flow.width as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for p in 0..flow.len() {
        bytes.extend_from_slice(&flow.u[p].to_le_bytes());
        bytes.extend_from_slice(&flow.v[p].to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            path: name,
            reason: format!("{} bytes is shorter than the 12-byte header", bytes.len()),
        });
    }
    let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let i32_at = |i: usize| i32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let sentinel = f32_at(0);
    if sentinel != FLO_SENTINEL {
        return Err(Error::Format {
            path: name,
            reason: format!("bad sentinel {sentinel}, expected {FLO_SENTINEL}"),
        });
    }
    let (w, h) = (i32_at(4), i32_at(8));
    if w <= 0 || h <= 0 {
        return Err(Error::Format {
            path: name,
            reason: format!("non-positive dimensions {w}x{h}"),
        });
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + 8 * w * h;
    if bytes.len() != need {
        return Err(Error::Truncated {
            path: name,
            reason: format!("{w}x{h} field needs {need} bytes, file has {}", bytes.len()),
        });
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for p in 0..w * h {
        u.push(f32_at(12 + 8 * p));
        v.push(f32_at(16 + 8 * p));
    }
    FlowField::new(w, h, u, v)
}

// ---- KITTI ----------------------------------------------------------------

/// Decode KITTI's flow encoding from already-decoded 16-bit pixels, laid
/// out row-major with 3 interleaved channels. Invalid pixels carry (0, 0).
pub fn kitti_flow_from_u16(
    width: usize,
    height: usize,
    pixels: &[u16],
) -> Result<(FlowField, Vec<bool>)> {
    if pixels.len() != width * height * 3 {
        return Err(Error::InvalidArgument(format!(
            "KITTI flow {width}x{height} needs {} channel values, got {}",
            width * height * 3,
            pixels.len()
        )));
    }
    let mut u = vec![0.0f32; width * height];
    let mut v = vec![0.0f32; width * height];
    let mut valid = vec![false; width * height];
    for p in 0..width * height {
        let (cu, cv, cm) = (pixels[3 * p], pixels[3 * p + 1], pixels[3 * p + 2]);
        if cm > 0 {
            u[p] = (cu as f32 - 32768.0) / 64.0;
            v[p] = (cv as f32 - 32768.0) / 64.0;
            valid[p] = true;
        }
    }
    Ok((FlowField::new(width, height, u, v)?, valid))
}

// ---- PPM / PGM ------------------------------------------------------------

/// Scans PNM header tokens: whitespace-separated, `#` comments run to the
/// end of the line.
fn pnm_tokens(bytes: &[u8], count: usize, path: &str) -> Result<(Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < count {
        while i < bytes.len() {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else if bytes[i].is_ascii_whitespace() {
                i += 1;
            } else {
                break;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i == start {
            return Err(Error::Format {
                path: path.into(),
                reason: "malformed header token".into(),
            });
        }
        let tok = std::str::from_utf8(&bytes[start..i]).unwrap();
        out.push(tok.parse::<usize>().map_err(|_| Error::Format {
            path: path.into(),
            reason: format!("header value {tok} out of range"),
        })?);
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::Format {
            path: path.into(),
            reason: "missing raster separator after header".into(),
        });
    }
    Ok((out, i + 1))
}

fn read_pnm(path: &Path, magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format {
            path: name,
            reason: format!("not a {} file", std::str::from_utf8(magic).unwrap()),
        });
    }
    let (vals, raster) = pnm_tokens(&bytes[2..], 3, &name)?;
    let (w, h, maxval) = (vals[0], vals[1], vals[2]);
    if maxval != 255 {
        return Err(Error::Format {
            path: name,
            reason: format!("maxval must be 255, got {maxval}"),
        });
    }
    if w == 0 || h == 0 {
        return Err(Error::Format {
            path: name,
            reason: format!("degenerate dimensions {w}x{h}"),
        });
    }
    let raster = raster + 2;
    let need = w * h * channels;
    if bytes.len() < raster + need {
        return Err(Error::Truncated {
            path: name,
            reason: format!(
                "raster needs {need} bytes, file has {}",
                bytes.len() - raster.min(bytes.len())
            ),
        });
    }
    Ok((w, h, bytes[raster..raster + need].to_vec()))
}

/// Read a binary P6 PPM into a [3, H, W] tensor scaled to [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, raster) = read_pnm(path, b"P6", 3)?;
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = raster[3 * p + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Write a [3, H, W] tensor as binary P6, rounding each value to a byte.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidArgument(format!(
            "write_ppm expects a [3, H, W] tensor, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for p in 0..plane {
        for c in 0..3 {
            out.push((data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a P5 PGM validity mask; 255 marks valid pixels.
pub fn read_pgm_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let (w, h, raster) = read_pnm(path, b"P5", 1)?;
    Ok((w, h, raster.iter().map(|&b| b == 255).collect()))
}

pub fn write_pgm_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "mask length {} does not cover {width}x{height}",
            mask.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---- toy dataset ----------------------------------------------------------

/// Procedural pair generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub size: usize,
    pub num_shapes: usize,
    pub shape_min: usize,
    pub shape_max: usize,
    pub max_displacement: f64,
    /// Rounds of 3x3 box blur applied to the noise textures.
    pub texture_smoothing: usize,
    /// Snap displacements to whole pixels so the ground-truth warp is exact
    /// up to float rounding; fractional motion double-interpolates.
    pub integer_displacements: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            size: 64,
            num_shapes: 2,
            shape_min: 10,
            shape_max: 24,
            max_displacement: 4.0,
            texture_smoothing: 6,
            integer_displacements: true,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("toy image size must be positive".into()));
        }
        if self.max_displacement < 0.0 || self.max_displacement >= self.size as f64 / 4.0 {
            return Err(Error::Config(format!(
                "max displacement {} must be in [0, size/4 = {})",
                self.max_displacement,
                self.size as f64 / 4.0
            )));
        }
        if self.shape_min == 0 || self.shape_min > self.shape_max || self.shape_max > self.size {
            return Err(Error::Config(format!(
                "shape size range [{}, {}] invalid for image size {}",
                self.shape_min, self.shape_max, self.size
            )));
        }
        Ok(())
    }
}

/// Noise blurred by repeated 3x3 box filtering, affinely mapped into a
/// per-channel band so shapes and background stay visually distinct.
struct Texture {
    size: usize,
    // 3 channel planes, canvas-major
    data: Vec<f32>,
}

impl Texture {
    fn noise(rng: &mut StreamRng, size: usize, rounds: usize) -> Texture {
        let plane = size * size;
        let mut data: Vec<f32> = (0..3 * plane).map(|_| rng.uniform() as f32).collect();
        let mut tmp = vec![0.0f32; plane];
        for _ in 0..rounds {
            for c in 0..3 {
                let ch = &mut data[c * plane..][..plane];
                for y in 0..size {
                    for x in 0..size {
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let yy = y as i64 + dy;
                                let xx = x as i64 + dx;
                                if yy >= 0 && yy < size as i64 && xx >= 0 && xx < size as i64 {
                                    acc += ch[yy as usize * size + xx as usize];
                                    cnt += 1.0;
                                }
                            }
                        }
                        tmp[y * size + x] = acc / cnt;
                    }
                }
                ch.copy_from_slice(&tmp);
            }
        }
        // stretch the blurred noise back to a wide band around a random
        // per-channel base so contrast survives the smoothing
        for c in 0..3 {
            let ch = &mut data[c * plane..][..plane];
            let (mut lo, mut hi) = (f32::MAX, f32::MIN);
            for &v in ch.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let span = (hi - lo).max(1e-6);
            let base = rng.uniform_in(0.25, 0.75) as f32;
            for v in ch.iter_mut() {
                *v = (base + ((*v - lo) / span - 0.5) * 0.7).clamp(0.0, 1.0);
            }
        }
        Texture { size, data }
    }

    /// Bilinear sample with clamped coordinates, per channel.
    fn sample(&self, c: usize, x: f64, y: f64) -> f32 {
        let plane = self.size * self.size;
        let ch = &self.data[c * plane..][..plane];
        let cx = x.clamp(0.0, (self.size - 1) as f64);
        let cy = y.clamp(0.0, (self.size - 1) as f64);
        let x0 = (cx.floor() as usize).min(self.size - 1);
        let y0 = (cy.floor() as usize).min(self.size - 1);
        let x1 = (x0 + 1).min(self.size - 1);
        let y1 = (y0 + 1).min(self.size - 1);
        let (wx, wy) = ((cx - x0 as f64) as f32, (cy - y0 as f64) as f32);
        let top = ch[y0 * self.size + x0] * (1.0 - wx) + ch[y0 * self.size + x1] * wx;
        let bot = ch[y1 * self.size + x0] * (1.0 - wx) + ch[y1 * self.size + x1] * wx;
        top * (1.0 - wy) + bot * wy
    }
}

enum ShapeKind {
    Rect,
    Disc,
}

/// A moving element: the background is index 0; shapes stack above it in
/// ascending index order.
struct Layer {
    kind: Option<(ShapeKind, f64, f64, f64)>, // (kind, cx, cy, half) in frame-1 coords; None = background
    texture: Texture,
    du: f64,
    dv: f64,
}

impl Layer {
    /// Coverage test in frame-1 coordinates.
    fn covers(&self, x: f64, y: f64) -> bool {
        match &self.kind {
            None => true,
            Some((ShapeKind::Rect, cx, cy, half)) => {
                (x - cx).abs() <= *half && (y - cy).abs() <= *half
            }
            Some((ShapeKind::Disc, cx, cy, half)) => {
                (x - cx).powi(2) + (y - cy).powi(2) <= half * half
            }
        }
    }
}

/// Render a frame pair with exact ground truth. Pure in (cfg, rng state):
/// the same child stream gives bit-identical samples.
pub fn gen_toy_pair(cfg: &ToyConfig, rng: &StreamRng) -> Result<FlowSample> {
    cfg.validate()?;
    let s = cfg.size;
    let margin = cfg.max_displacement.ceil() as usize + 1;
    let canvas = s + 2 * margin;
    let snap = |d: f64| if cfg.integer_displacements { d.round() } else { d };
    let mut layers = Vec::new();
    {
        let mut r = rng.child("background");
        let texture = Texture::noise(&mut r, canvas, cfg.texture_smoothing);
        let du = snap(r.uniform_in(-cfg.max_displacement, cfg.max_displacement));
        let dv = snap(r.uniform_in(-cfg.max_displacement, cfg.max_displacement));
        layers.push(Layer {
            kind: None,
            texture,
            du,
            dv,
        });
    }
    for i in 0..cfg.num_shapes {
        let mut r = rng.child_indexed("shape", i as u64);
        let half = r.uniform_in(cfg.shape_min as f64, cfg.shape_max as f64) / 2.0;
        let cx = r.uniform_in(half, s as f64 - half);
        let cy = r.uniform_in(half, s as f64 - half);
        let kind = if r.bernoulli(0.5) {
            ShapeKind::Rect
        } else {
            ShapeKind::Disc
        };
        let texture = Texture::noise(&mut r, canvas, cfg.texture_smoothing);
        let du = snap(r.uniform_in(-cfg.max_displacement, cfg.max_displacement));
        let dv = snap(r.uniform_in(-cfg.max_displacement, cfg.max_displacement));
        layers.push(Layer {
            kind: Some((kind, cx, cy, half)),
            texture,
            du,
            dv,
        });
    }
    // topmost layer covering a frame-1 pixel; frame-2 ownership queries the
    // same predicate at shifted coordinates
    let owner1 = |x: f64, y: f64| -> usize {
        (0..layers.len())
            .rev()
            .find(|&i| layers[i].covers(x, y))
            .unwrap()
    };
    let owner2 = |x: f64, y: f64| -> usize {
        (0..layers.len())
            .rev()
            .find(|&i| layers[i].covers(x - layers[i].du, y - layers[i].dv))
            .unwrap()
    };
    let plane = s * s;
    let mut f1 = vec![0.0f32; 3 * plane];
    let mut f2 = vec![0.0f32; 3 * plane];
    let mut u = vec![0.0f32; plane];
    let mut v = vec![0.0f32; plane];
    let mut valid = vec![false; plane];
    let m = margin as f64;
    for y in 0..s {
        for x in 0..s {
            let p = y * s + x;
            let (fx, fy) = (x as f64, y as f64);
            // frame 1: the owning layer's texture, window offset by margin
            let o1 = owner1(fx, fy);
            for c in 0..3 {
                f1[c * plane + p] = layers[o1].texture.sample(c, fx + m, fy + m);
            }
            // frame 2: the layer owning this pixel after motion, sampled at
            // its frame-1 position so content travels with the layer
            let o2 = owner2(fx, fy);
            for c in 0..3 {
                f2[c * plane + p] = layers[o2]
                    .texture
                    .sample(c, fx - layers[o2].du + m, fy - layers[o2].dv + m);
            }
            u[p] = layers[o1].du as f32;
            v[p] = layers[o1].dv as f32;
            // valid: the target lands in frame and is not occluded there
            let (tx, ty) = (fx + layers[o1].du, fy + layers[o1].dv);
            let in_frame =
                tx >= 0.0 && tx <= (s - 1) as f64 && ty >= 0.0 && ty <= (s - 1) as f64;
            if in_frame {
                let mut visible = true;
                for (nx, ny) in [
                    (tx.floor(), ty.floor()),
                    (tx.ceil(), ty.floor()),
                    (tx.floor(), ty.ceil()),
                    (tx.ceil(), ty.ceil()),
                ] {
                    if owner2(nx, ny) != o1 {
                        visible = false;
                    }
                }
                valid[p] = visible;
            }
        }
    }
    Ok(FlowSample {
        frame1: Tensor::new(vec![3, s, s], f1)?,
        frame2: Tensor::new(vec![3, s, s], f2)?,
        gt_flow: Some(FlowField::new(s, s, u, v)?),
        valid_mask: Some(valid),
    })
}

// ---- dataset directory layout ---------------------------------------------

pub fn sample_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{index:05}_img1.ppm")),
        dir.join(format!("{index:05}_img2.ppm")),
        dir.join(format!("{index:05}_flow.flo")),
        dir.join(format!("{index:05}_valid.pgm")),
    )
}

pub fn write_sample(dir: &Path, index: usize, sample: &FlowSample) -> Result<()> {
    let (p1, p2, pf, pv) = sample_paths(dir, index);
    write_ppm(&p1, &sample.frame1)?;
    write_ppm(&p2, &sample.frame2)?;
    if let Some(flow) = &sample.gt_flow {
        write_flo(&pf, flow)?;
        if let Some(mask) = &sample.valid_mask {
            write_pgm_mask(&pv, flow.width, flow.height, mask)?;
        }
    }
    Ok(())
}

pub fn read_sample(dir: &Path, index: usize) -> Result<FlowSample> {
    let (p1, p2, pf, pv) = sample_paths(dir, index);
    let frame1 = read_ppm(&p1)?;
    let frame2 = read_ppm(&p2)?;
    let gt_flow = if pf.exists() { Some(read_flo(&pf)?) } else { None };
    let valid_mask = if pv.exists() {
        Some(read_pgm_mask(&pv)?.2)
    } else {
        None
    };
    Ok(FlowSample {
        frame1,
        frame2,
        gt_flow,
        valid_mask,
    })
}

/// Sorted indices of all samples present in a dataset directory.
pub fn sample_indices(dir: &Path) -> Result<Vec<usize>> {
    let name = dir.display().to_string();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(name.clone(), e))? {
        let entry = entry.map_err(|e| Error::io(name.clone(), e))?;
        let fname = entry.file_name();
        let fname = fname.to_string_lossy();
        if let Some(stem) = fname.strip_suffix("_img1.ppm") {
            if let Ok(i) = stem.parse::<usize>() {
                out.push(i);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

// ---- visualization --------------------------------------------------------

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Flow color wheel: hue encodes direction, saturation encodes magnitude
/// relative to `max_mag` (default: the field's own maximum). Zero flow is
/// white. Returns the [3, H, W] image and the normalization actually used.
pub fn flow_to_color(flow: &FlowField, max_mag: Option<f32>) -> Result<(Tensor<f32>, f32)> {
    if !flow.all_finite() {
        return Err(Error::InvalidArgument(
            "cannot render non-finite flow".into(),
        ));
    }
    let norm = match max_mag {
        Some(m) if m > 0.0 => m,
        Some(m) => {
            return Err(Error::InvalidArgument(format!(
                "max magnitude must be positive, got {m}"
            )))
        }
        None => flow.max_magnitude().max(1e-6),
    };
    let plane = flow.len();
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        let (u, v) = (flow.u[p], flow.v[p]);
        let mag = (u * u + v * v).sqrt();
        let hue = v.atan2(u) / (2.0 * std::f32::consts::PI);
        let rgb = hsv_to_rgb(hue, (mag / norm).min(1.0), 1.0);
        for c in 0..3 {
            data[c * plane + p] = rgb[c];
        }
    }
    Ok((Tensor::new(vec![3, flow.height, flow.width], data)?, norm))
}
