//! Synthetic single/double compression datasets.
//!
//! Frames are smoothed multi-scale noise pushed through a chain of JPEG-like
//! 8×8 block-DCT quantization rounds. Intermediate planes stay real-valued and
//! are rounded to 8 bits only on output. The P-frame mode is a rough stand-in
//! for inter coding: shifted crops of the GOP's scene with a little fresh
//! noise, quantized more coarsely than the I-frame. There is no motion
//! compensation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::ingest::{PictType, SIDECAR_HEADER};
use crate::preprocess::{FramePlane, RasterFrame};
use crate::store::write_png;

pub const MIN_QUALITY: u8 = 10;
pub const MAX_QUALITY: u8 = 95;

/// Standard JPEG luminance quantization table, row-major.
pub const LUMA_QUANT_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

fn check_quality(quality: u8) -> Result<()> {
    if !(MIN_QUALITY..=MAX_QUALITY).contains(&quality) {
        return Err(Error::Config(format!(
            "quality {quality} outside [{MIN_QUALITY}, {MAX_QUALITY}]"
        )));
    }
    Ok(())
}

/// The luminance table scaled by the usual quality rule, entries in [1, 255].
pub fn quant_table(quality: u8) -> Result<[f64; 64]> {
    check_quality(quality)?;
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &base) in out.iter_mut().zip(&LUMA_QUANT_TABLE) {
        *o = ((base as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(out)
}

/// Orthonormal 8-point DCT-II basis, `C[k][n]`.
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0; 8]; 8];
        for (k, row) in c.iter_mut().enumerate() {
            let alpha = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = alpha * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
            }
        }
        c
    })
}

pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let c = dct_basis();
    let mut tmp = [0.0; 64];
    // rows: tmp = X Cᵀ
    for y in 0..8 {
        for k in 0..8 {
            tmp[y * 8 + k] = (0..8).map(|n| block[y * 8 + n] * c[k][n]).sum();
        }
    }
    let mut out = [0.0; 64];
    for k in 0..8 {
        for x in 0..8 {
            out[k * 8 + x] = (0..8).map(|n| c[k][n] * tmp[n * 8 + x]).sum();
        }
    }
    out
}

pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let c = dct_basis();
    let mut tmp = [0.0; 64];
    for k in 0..8 {
        for x in 0..8 {
            tmp[k * 8 + x] = (0..8).map(|j| coef[k * 8 + j] * c[j][x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|k| c[k][y] * tmp[k * 8 + x]).sum();
        }
    }
    out
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Applies `f` to every level-shifted 8×8 block. Planes whose sides are not
/// multiples of 8 are reflect-padded and cropped back afterwards.
fn map_blocks(plane: &FramePlane, mut f: impl FnMut(&mut [f64; 64])) -> FramePlane {
    let (w, h) = (plane.width, plane.height);
    let (pw, ph) = (w.div_ceil(8) * 8, h.div_ceil(8) * 8);
    let mut out = FramePlane::filled(w, h, 0.0);
    let mut block = [0.0; 64];
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = plane.at(reflect(bx + x, w), reflect(by + y, h)) - 128.0;
                }
            }
            f(&mut block);
            for y in 0..8.min(h.saturating_sub(by)) {
                for x in 0..8.min(w.saturating_sub(bx)) {
                    out.data[(by + y) * w + bx + x] = block[y * 8 + x] + 128.0;
                }
            }
        }
    }
    out
}

/// DCT then inverse DCT of every block with no quantization.
pub fn dct_round_trip(plane: &FramePlane) -> FramePlane {
    map_blocks(plane, |b| *b = idct8x8(&dct8x8(b)))
}

/// JPEG-style quantize/dequantize round at `quality`, clamped to [0, 255].
pub fn quantize_block_dct(plane: &FramePlane, quality: u8) -> Result<FramePlane> {
    let table = quant_table(quality)?;
    let mut out = map_blocks(plane, |b| {
        let mut coef = dct8x8(b);
        for (c, q) in coef.iter_mut().zip(&table) {
            *c = (*c / q).round() * q;
        }
        *b = idct8x8(&coef);
    });
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
    Ok(out)
}

/// Bilinear resampling to `round(factor × size)`, sample centers aligned.
pub fn rescale(plane: &FramePlane, factor: f64) -> Result<FramePlane> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::Config(format!("rescale factor {factor} must be positive")));
    }
    let nw = ((plane.width as f64 * factor).round() as usize).max(1);
    let nh = ((plane.height as f64 * factor).round() as usize).max(1);
    let sx = plane.width as f64 / nw as f64;
    let sy = plane.height as f64 / nh as f64;
    let sample = |x: f64, max: usize| -> (usize, usize, f64) {
        let x = x.clamp(0.0, (max - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(max - 1);
        (x0, x1, x - x0 as f64)
    };
    Ok(FramePlane::from_fn(nw, nh, |x, y| {
        let (x0, x1, fx) = sample((x as f64 + 0.5) * sx - 0.5, plane.width);
        let (y0, y1, fy) = sample((y as f64 + 0.5) * sy - 0.5, plane.height);
        let top = plane.at(x0, y0) * (1.0 - fx) + plane.at(x1, y0) * fx;
        let bottom = plane.at(x0, y1) * (1.0 - fx) + plane.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionStage {
    pub quality: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescale: Option<f64>,
}

impl CompressionStage {
    pub fn quality(quality: u8) -> Self {
        Self { quality, rescale: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionChain {
    pub name: String,
    pub stages: Vec<CompressionStage>,
}

impl CompressionChain {
    pub fn new(name: &str, qualities: &[u8]) -> Self {
        Self {
            name: name.to_owned(),
            stages: qualities.iter().map(|&q| CompressionStage::quality(q)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(format!("chain `{}` has no stages", self.name)));
        }
        for s in &self.stages {
            check_quality(s.quality)?;
            if let Some(f) = s.rescale {
                if !(f.is_finite() && f > 0.0) {
                    return Err(Error::Config(format!("chain `{}`: bad rescale factor {f}", self.name)));
                }
            }
        }
        Ok(())
    }

    /// Runs every stage; the result is real-valued.
    pub fn apply(&self, plane: &FramePlane) -> Result<FramePlane> {
        self.apply_with_drop(plane, 0)
    }

    /// Like [`apply`](Self::apply) with every quality lowered by `drop`
    /// (never below the minimum quality).
    pub fn apply_with_drop(&self, plane: &FramePlane, drop: u8) -> Result<FramePlane> {
        let mut cur = plane.clone();
        for s in &self.stages {
            if let Some(f) = s.rescale {
                cur = rescale(&cur, f)?;
            }
            let q = s.quality.saturating_sub(drop).max(MIN_QUALITY);
            cur = quantize_block_dct(&cur, q)?;
        }
        Ok(cur)
    }
}

/// Rounds and clamps a plane to an 8-bit grayscale frame.
pub fn to_raster(plane: &FramePlane) -> RasterFrame {
    RasterFrame {
        width: plane.width,
        height: plane.height,
        channels: 1,
        data: plane.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    }
}

fn value_noise(width: usize, height: usize, cell: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let gy = y / cell;
        let ty = smooth((y % cell) as f64 / cell as f64);
        for x in 0..width {
            let gx = x / cell;
            let tx = smooth((x % cell) as f64 / cell as f64);
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(gx, gy) * (1.0 - tx) + g(gx + 1, gy) * tx;
            let bottom = g(gx, gy + 1) * (1.0 - tx) + g(gx + 1, gy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

pub const BASE_LOW: f64 = 24.0;
pub const BASE_HIGH: f64 = 232.0;
const FINE_NOISE: f64 = 4.0;

/// A natural-looking grayscale scene in `[BASE_LOW, BASE_HIGH]`: multi-scale
/// value noise, a random linear gradient and fine pixel noise.
pub fn base_image(width: usize, height: usize, rng: &mut impl Rng) -> FramePlane {
    let mut acc = vec![0.0; width * height];
    for (cell, amp) in [(64, 1.0), (32, 0.6), (16, 0.4), (8, 0.25), (4, 0.15), (2, 0.1)] {
        for (a, v) in acc.iter_mut().zip(value_noise(width, height, cell, rng)) {
            *a += amp * v;
        }
    }
    let (gx, gy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    for y in 0..height {
        for x in 0..width {
            acc[y * width + x] += gx * x as f64 / width as f64 + gy * y as f64 / height as f64;
        }
    }
    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let (a, b) = (BASE_LOW + FINE_NOISE, BASE_HIGH - FINE_NOISE);
    let data = acc
        .into_iter()
        .map(|v| a + (v - lo) / span * (b - a) + rng.gen_range(-FINE_NOISE..FINE_NOISE))
        .collect();
    FramePlane { width, height, data }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub chains: Vec<CompressionChain>,
    pub videos_per_class: usize,
    pub gops_per_video: usize,
    /// P-frames after each I-frame; 0 emits I-frames only.
    pub p_frames_per_gop: usize,
    pub p_quality_drop: u8,
    /// Maximum per-frame shift of the P-frame window, in pixels.
    pub max_motion: usize,
    pub width: usize,
    pub height: usize,
    /// Videos are spread round-robin over this many device names.
    pub devices: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            chains: vec![
                CompressionChain::new("single", &[90]),
                CompressionChain::new("double", &[90, 70]),
            ],
            videos_per_class: 25,
            gops_per_video: 10,
            p_frames_per_gop: 0,
            p_quality_drop: 10,
            max_motion: 2,
            width: 128,
            height: 128,
            devices: 2,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains.len() < 2 {
            return Err(Error::Config("at least two compression chains are required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.chains {
            c.validate()?;
            if !names.insert(&c.name) {
                return Err(Error::Config(format!("duplicate chain name `{}`", c.name)));
            }
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config("frames must be at least 8x8".into()));
        }
        if self.videos_per_class == 0 || self.gops_per_video == 0 || self.devices == 0 {
            return Err(Error::Config("video, GOP and device counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedFrame {
    pub video_id: String,
    pub class: String,
    pub device: String,
    pub frame_index: u64,
    pub pict_type: PictType,
    pub frame: RasterFrame,
}

/// Generates every frame in (class, video, frame) order. Each GOP has its own
/// random stream, so output is fixed by the seed alone.
pub fn generate_frames(cfg: &GenConfig, mut emit: impl FnMut(GeneratedFrame) -> Result<()>) -> Result<()> {
    cfg.validate()?;
    let m = cfg.max_motion * cfg.p_frames_per_gop;
    for (ci, chain) in cfg.chains.iter().enumerate() {
        for v in 0..cfg.videos_per_class {
            let video_id = format!("{}_{v:03}", chain.name);
            let device = format!("dev{:02}", v % cfg.devices);
            let mut index = 0u64;
            for g in 0..cfg.gops_per_video {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(((ci * cfg.videos_per_class + v) * cfg.gops_per_video + g) as u64);
                let scene = base_image(cfg.width + 2 * m, cfg.height + 2 * m, &mut rng);
                let crop = |ox: usize, oy: usize| {
                    FramePlane::from_fn(cfg.width, cfg.height, |x, y| scene.at(x + ox, y + oy))
                };
                let mut frame = GeneratedFrame {
                    video_id: video_id.clone(),
                    class: chain.name.clone(),
                    device: device.clone(),
                    frame_index: index,
                    pict_type: PictType::I,
                    frame: to_raster(&chain.apply(&crop(m, m))?),
                };
                emit(frame.clone())?;
                index += 1;
                let (mut ox, mut oy) = (m as isize, m as isize);
                let step = cfg.max_motion as isize;
                for _ in 0..cfg.p_frames_per_gop {
                    ox = (ox + rng.gen_range(-step..=step)).clamp(0, 2 * m as isize);
                    oy = (oy + rng.gen_range(-step..=step)).clamp(0, 2 * m as isize);
                    let mut p = crop(ox as usize, oy as usize);
                    p.data.iter_mut().for_each(|v| *v += rng.gen_range(-1.0..1.0));
                    frame.frame = to_raster(&chain.apply_with_drop(&p, cfg.p_quality_drop)?);
                    frame.frame_index = index;
                    frame.pict_type = PictType::P;
                    emit(frame.clone())?;
                    index += 1;
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GenSummary {
    pub frames: usize,
    pub sidecar: PathBuf,
    pub labels: PathBuf,
}

/// Writes PNG frames under `out/frames`, plus `out/sidecar.csv` and
/// `out/labels.csv`. Frame paths in the sidecar are relative to `out`.
pub fn generate_dataset(cfg: &GenConfig, out: &Path) -> Result<GenSummary> {
    cfg.validate()?;
    let frames_dir = out.join("frames");
    std::fs::create_dir_all(&frames_dir).at(&frames_dir)?;
    let mut sidecar = SIDECAR_HEADER.join(",") + "\n";
    let mut labels = String::from("video_id,class,device\n");
    let mut last_video = String::new();
    let mut count = 0;
    generate_frames(cfg, |f| {
        let rel = format!("frames/{}_{:05}.png", f.video_id, f.frame_index);
        write_png(&out.join(&rel), &f.frame)?;
        let t = match f.pict_type {
            PictType::I => "I",
            PictType::P => "P",
            PictType::B => "B",
        };
        let _ = writeln!(
            sidecar,
            "{},{},{t},{},{},{rel}",
            f.video_id, f.frame_index, f.frame.width, f.frame.height
        );
        if f.video_id != last_video {
            let _ = writeln!(labels, "{},{},{}", f.video_id, f.class, f.device);
            last_video = f.video_id;
        }
        count += 1;
        Ok(())
    })?;
    let sidecar_path = out.join("sidecar.csv");
    let labels_path = out.join("labels.csv");
    std::fs::write(&sidecar_path, sidecar).at(&sidecar_path)?;
    std::fs::write(&labels_path, labels).at(&labels_path)?;
    Ok(GenSummary {
        frames: count,
        sidecar: sidecar_path,
        labels: labels_path,
    })
}
