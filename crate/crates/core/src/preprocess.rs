//! Residual front-ends for the two frame streams.
//!
//! I-frames: luma → S5a high-pass residual → 1-channel patches.
//! P-frames: each of three consecutive frames → luma − Gaussian blur, stacked
//! into 3-channel patches cropped at identical coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default patch edge in pixels.
pub const PATCH_SIZE: usize = 256;

/// The 5×5 "square" SRM residual (S5a), before the 1/12 scale.
pub const S5A_KERNEL: [[f64; 5]; 5] = [
    [-1.0, 2.0, -2.0, 2.0, -1.0],
    [2.0, -6.0, 8.0, -6.0, 2.0],
    [-2.0, 8.0, -12.0, 8.0, -2.0],
    [2.0, -6.0, 8.0, -6.0, 2.0],
    [-1.0, 2.0, -2.0, 2.0, -1.0],
];
pub const S5A_SCALE: f64 = 1.0 / 12.0;

pub const GAUSSIAN_SIZE: usize = 5;
pub const GAUSSIAN_SIGMA: f64 = 1.0;

/// An 8-bit raster frame, grayscale (1 channel) or interleaved RGB (3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterFrame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RasterFrame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Input(format!(
                "{width}x{height}x{channels} frame needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }
}

/// A real-valued single-channel plane, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePlane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FramePlane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "{width}x{height} plane needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Full-range BT.601 luma, kept unrounded.
pub fn rgb_to_luma(frame: &RasterFrame) -> Result<FramePlane> {
    if frame.channels != 3 {
        return Err(Error::Input(format!(
            "RGB conversion needs 3 channels, frame has {}",
            frame.channels
        )));
    }
    let data = frame
        .data
        .chunks_exact(3)
        .map(|px| 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64)
        .collect();
    FramePlane::new(frame.width, frame.height, data)
}

/// Luma of a frame: converted for RGB, taken as-is for grayscale.
pub fn luma(frame: &RasterFrame) -> Result<FramePlane> {
    match frame.channels {
        1 => FramePlane::new(frame.width, frame.height, frame.data.iter().map(|&v| v as f64).collect()),
        3 => rgb_to_luma(frame),
        c => Err(Error::Input(format!("unsupported channel count {c}"))),
    }
}

/// Mirror index without repeating the edge sample: -1 → 1, n → n − 2.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // a single reflection suffices while the kernel radius is below n
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn check_min_size(plane: &FramePlane, size: usize, what: &str) -> Result<()> {
    if plane.width < size || plane.height < size {
        return Err(Error::Input(format!(
            "{what} needs a plane of at least {size}x{size}, got {}x{}",
            plane.width, plane.height
        )));
    }
    Ok(())
}

/// Same-size 2-D convolution (kernel flipped) with reflective borders, for
/// zero-sum kernels. Taps act on differences from the center pixel, so flat
/// regions give exact zeros.
fn convolve_reflect<const K: usize>(plane: &FramePlane, kernel: &[[f64; K]; K], scale: f64) -> FramePlane {
    let r = (K / 2) as isize;
    let (w, h) = (plane.width, plane.height);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let center = plane.data[y * w + x];
            let mut acc = 0.0;
            for (i, row) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + r - i as isize, h);
                for (j, &k) in row.iter().enumerate() {
                    let sx = reflect(x as isize + r - j as isize, w);
                    acc += k * (plane.data[sy * w + sx] - center);
                }
            }
            out.push(acc * scale);
        }
    }
    FramePlane {
        width: w,
        height: h,
        data: out,
    }
}

/// S5a high-pass residual, same size as the input.
pub fn hpf_s5a(y: &FramePlane) -> Result<FramePlane> {
    check_min_size(y, 5, "S5a filter")?;
    Ok(convolve_reflect(y, &S5A_KERNEL, S5A_SCALE))
}

/// Normalized 1-D Gaussian taps; their outer product is the 2-D kernel.
pub fn gaussian_taps() -> [f64; GAUSSIAN_SIZE] {
    let r = (GAUSSIAN_SIZE / 2) as f64;
    let mut taps = [0.0; GAUSSIAN_SIZE];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-(d * d) / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable Gaussian blur with reflective borders. Each pass adds weighted
/// differences to the center value, so a constant plane comes back unchanged.
pub fn gaussian_blur(y: &FramePlane) -> Result<FramePlane> {
    check_min_size(y, GAUSSIAN_SIZE, "Gaussian filter")?;
    let taps = gaussian_taps();
    let r = (GAUSSIAN_SIZE / 2) as isize;
    let (w, h) = (y.width, y.height);
    let mut rows = vec![0.0; w * h];
    for yy in 0..h {
        for x in 0..w {
            let c = y.data[yy * w + x];
            rows[yy * w + x] = c + taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * (y.data[yy * w + reflect(x as isize + r - j as isize, w)] - c))
                .sum::<f64>();
        }
    }
    let mut out = vec![0.0; w * h];
    for yy in 0..h {
        for x in 0..w {
            let c = rows[yy * w + x];
            out[yy * w + x] = c + taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * (rows[reflect(yy as isize + r - i as isize, h) * w + x] - c))
                .sum::<f64>();
        }
    }
    FramePlane::new(w, h, out)
}

/// `Y − G(Y)`.
pub fn gaussian_residual(y: &FramePlane) -> Result<FramePlane> {
    let blurred = gaussian_blur(y)?;
    let data = y.data.iter().zip(&blurred.data).map(|(a, b)| a - b).collect();
    FramePlane::new(y.width, y.height, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PatchKind {
    /// 1-channel S5a residual of an I-frame.
    I,
    /// 3-channel Gaussian residual of a P-frame triplet.
    P,
}

impl PatchKind {
    pub fn channels(self) -> usize {
        match self {
            PatchKind::I => 1,
            PatchKind::P => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub video_id: String,
    /// For P patches, the index of the center frame of the triplet.
    pub frame_index: u64,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub kind: PatchKind,
    pub label: u32,
    pub origin: PatchOrigin,
    pub size: usize,
    /// `channels × size × size`, channel-major.
    pub data: Vec<f32>,
}

impl Patch {
    pub fn dims(&self) -> [usize; 4] {
        [1, self.kind.channels(), self.size, self.size]
    }

    pub fn to_tensor(&self) -> provnet_engine::Tensor<f32> {
        provnet_engine::Tensor::new(self.dims(), self.data.clone()).expect("patch dims are consistent")
    }
}

/// Top-left corners `(row, col)` of the non-overlapping tiles, row-major,
/// anchored at the origin; leftover right/bottom pixels are dropped.
pub fn patch_grid(width: usize, height: usize, size: usize) -> Vec<(usize, usize)> {
    if size == 0 {
        return Vec::new();
    }
    let (cols, rows) = (width / size, height / size);
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r * size, c * size)))
        .collect()
}

/// A channel-major tile of `planes` (all the same size) at `(row, col)`.
pub fn extract_tile(planes: &[&FramePlane], row: usize, col: usize, size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(planes.len() * size * size);
    for p in planes {
        for y in row..row + size {
            out.extend(p.data[y * p.width + col..y * p.width + col + size].iter().map(|&v| v as f32));
        }
    }
    out
}

/// Crops the stacked planes into tiles. Returns `((row, col), values)` in
/// grid order; an input smaller than one tile yields nothing.
pub fn crop_patches(planes: &[&FramePlane], size: usize) -> Result<Vec<((usize, usize), Vec<f32>)>> {
    let Some(first) = planes.first() else {
        return Ok(Vec::new());
    };
    if planes.iter().any(|p| p.width != first.width || p.height != first.height) {
        return Err(Error::Input("stacked planes differ in resolution".into()));
    }
    let grid = patch_grid(first.width, first.height, size);
    if grid.is_empty() {
        log::info!(
            "skipping {}x{} plane: smaller than one {size}x{size} patch",
            first.width,
            first.height
        );
    }
    Ok(grid
        .into_iter()
        .map(|(r, c)| ((r, c), extract_tile(planes, r, c, size)))
        .collect())
}

/// `HPF(Y(frame))` for an I-frame.
pub fn iframe_residual(frame: &RasterFrame) -> Result<FramePlane> {
    hpf_s5a(&luma(frame)?)
}

pub fn make_iframe_input(
    frame: &RasterFrame,
    video_id: &str,
    frame_index: u64,
    label: u32,
    size: usize,
) -> Result<Vec<Patch>> {
    let residual = iframe_residual(frame)?;
    Ok(crop_patches(&[&residual], size)?
        .into_iter()
        .map(|((row, col), data)| Patch {
            kind: PatchKind::I,
            label,
            origin: PatchOrigin {
                video_id: video_id.to_owned(),
                frame_index,
                row,
                col,
            },
            size,
            data,
        })
        .collect())
}

/// Three consecutive P-frames of one video, in temporal order.
#[derive(Clone, Debug)]
pub struct PFrameStack {
    pub video_id: String,
    pub center_index: u64,
    pub frames: [RasterFrame; 3],
}

/// `{Y(f) − G(f)}` for each frame of the triplet, stacked as channels.
pub fn pframe_residuals(stack: &PFrameStack) -> Result<[FramePlane; 3]> {
    let [a, b, c] = &stack.frames;
    if (a.width, a.height) != (b.width, b.height) || (a.width, a.height) != (c.width, c.height) {
        return Err(Error::Input(format!(
            "P-frame triplet around frame {} of `{}` mixes resolutions",
            stack.center_index, stack.video_id
        )));
    }
    Ok([
        gaussian_residual(&luma(a)?)?,
        gaussian_residual(&luma(b)?)?,
        gaussian_residual(&luma(c)?)?,
    ])
}

pub fn make_pframe_input(stack: &PFrameStack, label: u32, size: usize) -> Result<Vec<Patch>> {
    let residuals = pframe_residuals(stack)?;
    let planes: Vec<&FramePlane> = residuals.iter().collect();
    Ok(crop_patches(&planes, size)?
        .into_iter()
        .map(|((row, col), data)| Patch {
            kind: PatchKind::P,
            label,
            origin: PatchOrigin {
                video_id: stack.video_id.clone(),
                frame_index: stack.center_index,
                row,
                col,
            },
            size,
            data,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_reference_points() {
        let f = RasterFrame::new(3, 1, 3, vec![0, 0, 0, 255, 255, 255, 255, 0, 0]).unwrap();
        let y = rgb_to_luma(&f).unwrap();
        assert_eq!(y.data[0], 0.0);
        assert!((y.data[1] - 255.0).abs() < 1e-12);
        assert!((y.data[2] - 76.245).abs() < 1e-12);
    }

    #[test]
    fn luma_rejects_wrong_channel_count() {
        let f = RasterFrame::gray(2, 2, vec![0; 4]).unwrap();
        assert!(matches!(rgb_to_luma(&f), Err(Error::Input(_))));
        assert_eq!(luma(&f).unwrap().data, vec![0.0; 4]);
    }

    #[test]
    fn s5a_kernel_sums_to_zero() {
        let sum: f64 = S5A_KERNEL.iter().flatten().sum();
        assert_eq!(sum, 0.0);
    }

    #[test]
    fn filters_reject_small_planes() {
        let p = FramePlane::filled(4, 9, 1.0);
        assert!(matches!(hpf_s5a(&p), Err(Error::Input(_))));
        assert!(matches!(gaussian_residual(&p), Err(Error::Input(_))));
    }

    #[test]
    fn constant_planes_have_zero_residual() {
        let p = FramePlane::filled(9, 7, 113.0);
        assert!(hpf_s5a(&p).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(gaussian_residual(&p).unwrap().data.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn gaussian_residual_is_local_to_edges() {
        let p = FramePlane::from_fn(32, 8, |x, _| if x < 16 { 10.0 } else { 200.0 });
        let r = gaussian_residual(&p).unwrap();
        for y in 0..8 {
            for x in 0..32 {
                let v = r.at(x, y).abs();
                if (14..18).contains(&x) {
                    assert!(v > 1.0, "edge residual at {x}");
                } else {
                    assert!(v < 1e-9, "residual {v} at {x}");
                }
            }
        }
    }

    #[test]
    fn grid_counts_and_origins() {
        assert_eq!(patch_grid(256, 256, 256), vec![(0, 0)]);
        assert_eq!(patch_grid(511, 256, 256).len(), 1);
        assert_eq!(patch_grid(255, 1000, 256).len(), 0);
        let g = patch_grid(1920, 1080, 256);
        assert_eq!(g.len(), 28);
        assert_eq!(g[0], (0, 0));
        assert_eq!(g[6], (0, 1536));
        assert_eq!(g[27], (768, 1536));
    }

    #[test]
    fn small_frames_produce_no_patches() {
        let f = RasterFrame::gray(200, 300, vec![5; 60_000]).unwrap();
        assert!(make_iframe_input(&f, "v", 0, 0, 256).unwrap().is_empty());
    }

    #[test]
    fn iframe_patch_counts() {
        let f = RasterFrame::gray(640, 480, vec![77; 640 * 480]).unwrap();
        let patches = make_iframe_input(&f, "v", 3, 1, 256).unwrap();
        assert_eq!(patches.len(), 2);
        assert!(patches.iter().all(|p| p.data.iter().all(|&v| v == 0.0)));
        assert_eq!(patches[1].origin.col, 256);
        assert_eq!(patches[1].dims(), [1, 1, 256, 256]);
    }

    #[test]
    fn pframe_triplet_rejects_mixed_resolution() {
        let a = RasterFrame::gray(8, 8, vec![0; 64]).unwrap();
        let b = RasterFrame::gray(8, 9, vec![0; 72]).unwrap();
        let stack = PFrameStack {
            video_id: "v".into(),
            center_index: 1,
            frames: [a.clone(), b, a],
        };
        assert!(matches!(make_pframe_input(&stack, 0, 4), Err(Error::Input(_))));
    }
}
