//! The layer set used by the stream networks, each with a hand-written
//! backward pass.
//!
//! Layers cache what they need during `forward` and consume it in
//! `backward`. Parameter gradients accumulate until [`Param::zero_grad`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Dims, Scalar, Tensor};
use crate::{EngineError, Result};

/// Batchnorm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batchnorm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            grad: Tensor::zeros(value.dims()),
            value,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Non-trainable state that still belongs in a checkpoint.
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Declarative description of one layer; hashed into architecture fingerprints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    Pool {
        kind: PoolKind,
        window: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    /// "Same" padded convolution with unit stride.
    pub fn conv_same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    /// Output shape for a given input shape, without running anything.
    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        let [n, c, h, w] = input;
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if c != in_channels {
                    return Err(EngineError::Config(format!(
                        "conv2d expects {in_channels} input channels, got {c}"
                    )));
                }
                let (oh, ow) = conv_out_hw(h, w, kernel, stride, padding)?;
                Ok([n, out_channels, oh, ow])
            }
            LayerSpec::BatchNorm2d { channels } => {
                if c != channels {
                    return Err(EngineError::Config(format!(
                        "batchnorm has {channels} channels, input has {c}"
                    )));
                }
                Ok(input)
            }
            LayerSpec::Relu => Ok(input),
            LayerSpec::Pool { window, .. } => {
                if window == 0 || h % window != 0 || w % window != 0 {
                    return Err(EngineError::Config(format!(
                        "pool window {window} does not divide spatial dims {h}x{w}"
                    )));
                }
                Ok([n, c, h / window, w / window])
            }
            LayerSpec::GlobalAvgPool => {
                if h == 0 || w == 0 {
                    return Err(EngineError::Config("global pool over empty plane".into()));
                }
                Ok([n, c, 1, 1])
            }
            LayerSpec::Flatten => Ok([n, c * h * w, 1, 1]),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if c * h * w != in_features {
                    return Err(EngineError::Config(format!(
                        "linear expects width {in_features}, got {}",
                        c * h * w
                    )));
                }
                Ok([n, out_features, 1, 1])
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            LayerSpec::BatchNorm2d { channels } => 2 * channels,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => out_features * in_features + out_features,
            _ => 0,
        }
    }

    /// Instantiates the layer with He-uniform weights, zero biases and
    /// identity batchnorm.
    pub fn build<T: Scalar>(&self, name: &str, rng: &mut impl Rng) -> Layer<T> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let fan_in = in_channels * kernel * kernel;
                let weight = he_uniform([out_channels, in_channels, kernel, kernel], fan_in, rng);
                Layer::Conv2d(Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    weight: Param::new(format!("{name}.weight"), weight),
                    bias: Param::new(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1])),
                    input: None,
                })
            }
            LayerSpec::BatchNorm2d { channels } => Layer::BatchNorm2d(BatchNorm2d::new(name, channels)),
            LayerSpec::Relu => Layer::Relu(Relu { input: None }),
            LayerSpec::Pool { kind, window } => Layer::Pool(Pool2d {
                kind,
                window,
                cache: None,
            }),
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool(GlobalAvgPool { input_dims: None }),
            LayerSpec::Flatten => Layer::Flatten(Flatten { input_dims: None }),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let weight = he_uniform([out_features, in_features, 1, 1], in_features, rng);
                Layer::Linear(Linear {
                    in_features,
                    out_features,
                    weight: Param::new(format!("{name}.weight"), weight),
                    bias: Param::new(format!("{name}.bias"), Tensor::zeros([1, out_features, 1, 1])),
                    input: None,
                })
            }
        }
    }
}

fn he_uniform<T: Scalar>(dims: Dims, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(dims, |_, _, _, _| T::lit(rng.gen_range(-bound..bound)))
}

fn conv_out_hw(h: usize, w: usize, k: usize, s: usize, p: usize) -> Result<(usize, usize)> {
    if s == 0 || k == 0 {
        return Err(EngineError::Config("conv2d kernel and stride must be positive".into()));
    }
    if h + 2 * p < k || w + 2 * p < k {
        return Err(EngineError::Config(format!(
            "kernel {k} does not fit padded input {}x{}",
            h + 2 * p,
            w + 2 * p
        )));
    }
    Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
}

fn missing_forward(layer: &str) -> EngineError {
    EngineError::Usage(format!("{layer}: backward called before forward"))
}

fn check_grad_dims(expected: Dims, got: Dims, layer: &str) -> Result<()> {
    if expected != got {
        return Err(EngineError::Usage(format!(
            "{layer}: gradient dims {got:?} do not match output dims {expected:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

/// Geometry shared by im2col and col2im for one batch item.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Valid output columns for kernel column `kx`, i.e. those whose source
    /// column lies inside the unpadded input.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.p {
            0
        } else {
            (self.p - kx).div_ceil(self.s)
        };
        let hi = if self.w + self.p > kx {
            ((self.w + self.p - kx - 1) / self.s + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.s + ky) as isize - self.p as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.oh * self.ow;
        for ci in 0..self.c {
            let src = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let row = &mut cols[r * plane..(r + 1) * plane];
                    let (lo, hi) = self.col_range(kx);
                    for oy in 0..self.oh {
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        match self.src_row(oy, ky) {
                            None => dst.fill(T::zero()),
                            Some(iy) => {
                                dst[..lo].fill(T::zero());
                                dst[hi..].fill(T::zero());
                                let line = &src[iy * self.w..(iy + 1) * self.w];
                                if self.s == 1 {
                                    let start = lo + kx - self.p;
                                    dst[lo..hi].copy_from_slice(&line[start..start + hi - lo]);
                                } else {
                                    for ox in lo..hi {
                                        dst[ox] = line[ox * self.s + kx - self.p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.oh * self.ow;
        for ci in 0..self.c {
            let dst = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let row = &cols[r * plane..(r + 1) * plane];
                    let (lo, hi) = self.col_range(kx);
                    for oy in 0..self.oh {
                        if let Some(iy) = self.src_row(oy, ky) {
                            let line = &mut dst[iy * self.w..(iy + 1) * self.w];
                            let src = &row[oy * self.ow..(oy + 1) * self.ow];
                            for ox in lo..hi {
                                let ix = ox * self.s + kx - self.p;
                                line[ix] = line[ix] + src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    fn geom(&self, dims: Dims) -> Result<ConvGeom> {
        if dims[1] != self.in_channels {
            return Err(EngineError::Config(format!(
                "conv2d `{}` expects {} input channels, got {}",
                self.weight.name, self.in_channels, dims[1]
            )));
        }
        let (oh, ow) = conv_out_hw(dims[2], dims[3], self.kernel, self.stride, self.padding)?;
        Ok(ConvGeom {
            c: dims[1],
            h: dims[2],
            w: dims[3],
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            oh,
            ow,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geom(x.dims())?;
        let ckk = g.c * g.k * g.k;
        let plane = g.oh * g.ow;
        let mut out = Tensor::zeros([x.batch(), self.out_channels, g.oh, g.ow]);
        let mut cols = vec![T::zero(); ckk * plane];
        let weight = self.weight.value.data();
        let bias = self.bias.value.data();
        for n in 0..x.batch() {
            g.im2col(x.item(n), &mut cols);
            let y = out.item_mut(n);
            for (o, row) in y.chunks_mut(plane).enumerate() {
                row.fill(bias[o]);
            }
            T::gemm(
                self.out_channels,
                ckk,
                plane,
                weight,
                ckk as isize,
                1,
                &cols,
                plane as isize,
                1,
                T::one(),
                y,
                plane as isize,
                1,
            );
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_forward("conv2d"))?;
        let g = self.geom(x.dims())?;
        check_grad_dims([x.batch(), self.out_channels, g.oh, g.ow], dy.dims(), "conv2d")?;
        let ckk = g.c * g.k * g.k;
        let plane = g.oh * g.ow;
        let mut dx = Tensor::zeros(x.dims());
        let mut cols = vec![T::zero(); ckk * plane];
        let mut dcols = vec![T::zero(); ckk * plane];
        for n in 0..x.batch() {
            let dyn_ = dy.item(n);
            g.im2col(x.item(n), &mut cols);
            // dW += dY · colsᵀ
            T::gemm(
                self.out_channels,
                plane,
                ckk,
                dyn_,
                plane as isize,
                1,
                &cols,
                1,
                plane as isize,
                T::one(),
                self.weight.grad.data_mut(),
                ckk as isize,
                1,
            );
            let db = self.bias.grad.data_mut();
            for (o, row) in dyn_.chunks(plane).enumerate() {
                db[o] = db[o] + row.iter().fold(T::zero(), |a, &v| a + v);
            }
            // dcols = Wᵀ · dY
            T::gemm(
                ckk,
                self.out_channels,
                plane,
                self.weight.value.data(),
                1,
                ckk as isize,
                dyn_,
                plane as isize,
                1,
                T::zero(),
                &mut dcols,
                plane as isize,
                1,
            );
            g.col2im(&dcols, dx.item_mut(n));
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub momentum: f64,
    pub eps: f64,
    /// Use running statistics even in train mode and leave them untouched.
    pub frozen: bool,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled([1, channels, 1, 1], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1])),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: Tensor::zeros([1, channels, 1, 1]),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: Tensor::filled([1, channels, 1, 1], T::one()),
            },
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            frozen: false,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.dims();
        if c != self.channels {
            return Err(EngineError::Config(format!(
                "batchnorm `{}` has {} channels, input has {c}",
                self.gamma.name, self.channels
            )));
        }
        let batch_stats = mode == Mode::Train && !self.frozen;
        let count = n * h * w;
        if batch_stats && count <= 1 {
            return Err(EngineError::Config(format!(
                "batchnorm `{}` needs more than one value per channel in train mode",
                self.gamma.name
            )));
        }
        let hw = h * w;
        let mut x_hat = Tensor::zeros(x.dims());
        let mut out = Tensor::zeros(x.dims());
        let mut inv_stds = Vec::with_capacity(c);
        for ch in 0..c {
            let (mean, inv_std) = if batch_stats {
                let mut sum = 0.0f64;
                for b in 0..n {
                    let off = x.offset(b, ch, 0, 0);
                    sum += x.data()[off..off + hw].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let off = x.offset(b, ch, 0, 0);
                    sq += x.data()[off..off + hw]
                        .iter()
                        .map(|v| {
                            let d = v.to_f64().unwrap() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                let m = self.momentum;
                let rm = &mut self.running_mean.value.data_mut()[ch];
                *rm = T::lit((1.0 - m) * rm.to_f64().unwrap() + m * mean);
                let rv = &mut self.running_var.value.data_mut()[ch];
                let unbiased = sq / (count - 1) as f64;
                *rv = T::lit((1.0 - m) * rv.to_f64().unwrap() + m * unbiased);
                (T::lit(mean), T::lit(1.0 / (var + self.eps).sqrt()))
            } else {
                let rv = self.running_var.value.data()[ch].to_f64().unwrap();
                (
                    self.running_mean.value.data()[ch],
                    T::lit(1.0 / (rv + self.eps).sqrt()),
                )
            };
            let gamma = self.gamma.value.data()[ch];
            let beta = self.beta.value.data()[ch];
            for b in 0..n {
                let off = x.offset(b, ch, 0, 0);
                for i in off..off + hw {
                    let xh = (x.data()[i] - mean) * inv_std;
                    x_hat.data_mut()[i] = xh;
                    out.data_mut()[i] = gamma * xh + beta;
                }
            }
            inv_stds.push(inv_std);
        }
        self.cache = Some(BnCache {
            x_hat,
            inv_std: inv_stds,
            batch_stats,
        });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_forward("batchnorm2d"))?;
        check_grad_dims(cache.x_hat.dims(), dy.dims(), "batchnorm2d")?;
        let [n, c, h, w] = dy.dims();
        let hw = h * w;
        let m = T::lit((n * hw) as f64);
        let mut dx = Tensor::zeros(dy.dims());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let off = dy.offset(b, ch, 0, 0);
                for i in off..off + hw {
                    sum_dy = sum_dy + dy.data()[i];
                    sum_dy_xhat = sum_dy_xhat + dy.data()[i] * cache.x_hat.data()[i];
                }
            }
            let gamma = self.gamma.value.data()[ch];
            let g = &mut self.gamma.grad.data_mut()[ch];
            *g = *g + sum_dy_xhat;
            let bg = &mut self.beta.grad.data_mut()[ch];
            *bg = *bg + sum_dy;
            let scale = gamma * cache.inv_std[ch];
            for b in 0..n {
                let off = dy.offset(b, ch, 0, 0);
                for i in off..off + hw {
                    dx.data_mut()[i] = if cache.batch_stats {
                        scale * (dy.data()[i] - sum_dy / m - cache.x_hat.data()[i] * sum_dy_xhat / m)
                    } else {
                        scale * dy.data()[i]
                    };
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input = Some(x.clone());
        x.map(|v| v.max(T::zero()))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_forward("relu"))?;
        check_grad_dims(x.dims(), dy.dims(), "relu")?;
        let data = x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
            .collect();
        Tensor::new(x.dims(), data)
    }
}

#[derive(Clone, Debug)]
pub struct Pool2d {
    pub kind: PoolKind,
    pub window: usize,
    /// Input dims plus, for max pooling, the flat argmax of each output.
    cache: Option<(Dims, Vec<usize>)>,
}

impl Pool2d {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let spec = LayerSpec::Pool {
            kind: self.kind,
            window: self.window,
        };
        let od = spec.output_dims(x.dims())?;
        let win = self.window;
        let area = T::lit((win * win) as f64);
        let mut out = Tensor::zeros(od);
        let mut argmax = Vec::new();
        if self.kind == PoolKind::Max {
            argmax.reserve(out.len());
        }
        let mut o = 0;
        for n in 0..od[0] {
            for c in 0..od[1] {
                for oy in 0..od[2] {
                    for ox in 0..od[3] {
                        match self.kind {
                            PoolKind::Max => {
                                let mut best = x.offset(n, c, oy * win, ox * win);
                                for dy in 0..win {
                                    for dx in 0..win {
                                        let i = x.offset(n, c, oy * win + dy, ox * win + dx);
                                        if x.data()[i] > x.data()[best] {
                                            best = i;
                                        }
                                    }
                                }
                                out.data_mut()[o] = x.data()[best];
                                argmax.push(best);
                            }
                            PoolKind::Avg => {
                                let mut acc = T::zero();
                                for dy in 0..win {
                                    for dx in 0..win {
                                        acc = acc + x.at(n, c, oy * win + dy, ox * win + dx);
                                    }
                                }
                                out.data_mut()[o] = acc / area;
                            }
                        }
                        o += 1;
                    }
                }
            }
        }
        self.cache = Some((x.dims(), argmax));
        Ok(out)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (in_dims, argmax) = self.cache.take().ok_or_else(|| missing_forward("pool2d"))?;
        let win = self.window;
        let od = [in_dims[0], in_dims[1], in_dims[2] / win, in_dims[3] / win];
        check_grad_dims(od, dy.dims(), "pool2d")?;
        let mut dx = Tensor::zeros(in_dims);
        match self.kind {
            PoolKind::Max => {
                for (o, &i) in argmax.iter().enumerate() {
                    dx.data_mut()[i] = dx.data()[i] + dy.data()[o];
                }
            }
            PoolKind::Avg => {
                let area = T::lit((win * win) as f64);
                for n in 0..od[0] {
                    for c in 0..od[1] {
                        for y in 0..in_dims[2] {
                            for x in 0..in_dims[3] {
                                let i = dx.offset(n, c, y, x);
                                dx.data_mut()[i] = dy.at(n, c, y / win, x / win) / area;
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct GlobalAvgPool {
    input_dims: Option<Dims>,
}

impl GlobalAvgPool {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let od = LayerSpec::GlobalAvgPool.output_dims(x.dims())?;
        let hw = x.height() * x.width();
        let area = T::lit(hw as f64);
        let data = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / area)
            .collect();
        self.input_dims = Some(x.dims());
        Tensor::new(od, data)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self.input_dims.take().ok_or_else(|| missing_forward("global_avgpool"))?;
        check_grad_dims([dims[0], dims[1], 1, 1], dy.dims(), "global_avgpool")?;
        let hw = dims[2] * dims[3];
        let area = T::lit(hw as f64);
        let mut data = Vec::with_capacity(dims.iter().product());
        for &g in dy.data() {
            data.extend(std::iter::repeat_n(g / area, hw));
        }
        Tensor::new(dims, data)
    }
}

#[derive(Clone, Debug)]
pub struct Flatten {
    input_dims: Option<Dims>,
}

impl Flatten {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input_dims = Some(x.dims());
        x.clone().reshape([x.batch(), x.item_len(), 1, 1])
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self.input_dims.take().ok_or_else(|| missing_forward("flatten"))?;
        dy.clone().reshape(dims)
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out, in, 1, 1)`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.item_len() != self.in_features {
            return Err(EngineError::Config(format!(
                "linear `{}` expects width {}, got {}",
                self.weight.name,
                self.in_features,
                x.item_len()
            )));
        }
        let n = x.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        let mut out = Tensor::zeros([n, fo, 1, 1]);
        for row in out.data_mut().chunks_mut(fo) {
            row.copy_from_slice(self.bias.value.data());
        }
        T::gemm(
            n,
            fi,
            fo,
            x.data(),
            fi as isize,
            1,
            self.weight.value.data(),
            1,
            fi as isize,
            T::one(),
            out.data_mut(),
            fo as isize,
            1,
        );
        self.input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_forward("linear"))?;
        let n = x.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        check_grad_dims([n, fo, 1, 1], dy.dims(), "linear")?;
        // dW += dYᵀ · X
        T::gemm(
            fo,
            n,
            fi,
            dy.data(),
            1,
            fo as isize,
            x.data(),
            fi as isize,
            1,
            T::one(),
            self.weight.grad.data_mut(),
            fi as isize,
            1,
        );
        let db = self.bias.grad.data_mut();
        for row in dy.data().chunks(fo) {
            for (b, &g) in db.iter_mut().zip(row) {
                *b = *b + g;
            }
        }
        let mut dx = Tensor::zeros(x.dims());
        T::gemm(
            n,
            fo,
            fi,
            dy.data(),
            fo as isize,
            1,
            self.weight.value.data(),
            fi as isize,
            1,
            T::zero(),
            dx.data_mut(),
            fi as isize,
            1,
        );
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    BatchNorm2d(BatchNorm2d<T>),
    Relu(Relu<T>),
    Pool(Pool2d),
    GlobalAvgPool(GlobalAvgPool),
    Flatten(Flatten),
    Linear(Linear<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::BatchNorm2d(l) => l.forward(x, mode),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::Pool(l) => l.forward(x),
            Layer::GlobalAvgPool(l) => l.forward(x),
            Layer::Flatten(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.backward(dy),
            Layer::BatchNorm2d(l) => l.backward(dy),
            Layer::Relu(l) => l.backward(dy),
            Layer::Pool(l) => l.backward(dy),
            Layer::GlobalAvgPool(l) => l.backward(dy),
            Layer::Flatten(l) => l.backward(dy),
            Layer::Linear(l) => l.backward(dy),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(l) => LayerSpec::Conv2d {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
                stride: l.stride,
                padding: l.padding,
            },
            Layer::BatchNorm2d(l) => LayerSpec::BatchNorm2d { channels: l.channels },
            Layer::Relu(_) => LayerSpec::Relu,
            Layer::Pool(l) => LayerSpec::Pool {
                kind: l.kind,
                window: l.window,
            },
            Layer::GlobalAvgPool(_) => LayerSpec::GlobalAvgPool,
            Layer::Flatten(_) => LayerSpec::Flatten,
            Layer::Linear(l) => LayerSpec::Linear {
                in_features: l.in_features,
                out_features: l.out_features,
            },
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm2d(l) => vec![&l.gamma, &l.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm2d(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        match self {
            Layer::BatchNorm2d(l) => vec![&l.running_mean, &l.running_var],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        match self {
            Layer::BatchNorm2d(l) => vec![&mut l.running_mean, &mut l.running_var],
            _ => Vec::new(),
        }
    }

    /// Freezes parameters; batchnorm additionally switches to running statistics.
    pub fn set_frozen(&mut self, frozen: bool) {
        if let Layer::BatchNorm2d(l) = self {
            l.frozen = frozen;
        }
        for p in self.params_mut() {
            p.trainable = !frozen;
        }
    }
}
