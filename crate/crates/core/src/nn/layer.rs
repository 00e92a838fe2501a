//! Layer kinds used by the network: forward, exact backward, parameter shapes.
//!
//! Batch tensors are row-major with the batch extent first. Channel layouts:
//!
//! * `conv1d`, `maxpool1d`: `[N, A*C, L]` where `A` is the number of sensor
//!   axes processed side by side (one for a plain 1-D convolution).
//! * `concat-axes`: `[N, A*C, L] -> [N, C, A, L]`.
//! * `conv2d`, `maxpool2d`: `[N, C, H, W]`.
//! * `batchnorm`: `[N, X, ...]` with `X` a multiple of the channel count;
//!   row `x` belongs to channel `x % channels`, so statistics pool across axes.
//! * `dense`: flattens everything after the batch extent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        /// Sensor axes laid side by side along the channel dimension.
        axes: usize,
        /// One weight set for all axes when true, one per axis otherwise.
        shared_axes: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        channels: usize,
        momentum: f64,
        epsilon: f64,
    },
    #[serde(rename = "maxpool1d")]
    MaxPool1d {
        size: usize,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        size: [usize; 2],
    },
    Dense {
        inputs: usize,
        units: usize,
        weight_decay: f64,
    },
    Dropout {
        p: f64,
    },
    Relu,
    Softmax,
    ConcatAxes {
        axes: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    /// Dropout active, batchnorm on running statistics.
    StochasticEval,
    DeterministicEval,
}

/// Exponential moving averages of batchnorm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Folds the batch statistics held by a train-mode batchnorm cache.
    pub fn update(&mut self, cache: &Cache, momentum: f64) {
        if let CacheInner::BatchNorm {
            batch: Some((mean, var)),
            ..
        } = &cache.0
        {
            for (r, b) in self.mean.iter_mut().zip(mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, b) in self.var.iter_mut().zip(var) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }
}

/// State saved by a forward call for the matching backward call.
#[derive(Clone, Debug)]
pub struct Cache(CacheInner);

#[derive(Clone, Debug)]
enum CacheInner {
    Conv1d {
        input: Tensor,
    },
    Conv2d {
        input: Tensor,
    },
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        in_shape: Vec<usize>,
        /// Batch mean and variance, present in train mode only.
        batch: Option<(Vec<f64>, Vec<f64>)>,
    },
    MaxPool {
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    Dense {
        input: Tensor,
    },
    Dropout {
        /// Per-element multiplier (0 or 1/(1-p)); `None` when the layer was the identity.
        mask: Option<Vec<f64>>,
    },
    Relu {
        input: Tensor,
    },
    Softmax {
        output: Tensor,
    },
    ConcatAxes {
        in_shape: Vec<usize>,
    },
}

impl CacheInner {
    fn kind(&self) -> &'static str {
        match self {
            CacheInner::Conv1d { .. } => "conv1d",
            CacheInner::Conv2d { .. } => "conv2d",
            CacheInner::BatchNorm { .. } => "batchnorm",
            CacheInner::MaxPool { in_shape, .. } => {
                if in_shape.len() == 3 {
                    "maxpool1d"
                } else {
                    "maxpool2d"
                }
            }
            CacheInner::Dense { .. } => "dense",
            CacheInner::Dropout { .. } => "dropout",
            CacheInner::Relu { .. } => "relu",
            CacheInner::Softmax { .. } => "softmax",
            CacheInner::ConcatAxes { .. } => "concat-axes",
        }
    }
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::MaxPool1d { .. } => "maxpool1d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
            LayerSpec::ConcatAxes { .. } => "concat-axes",
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, LayerSpec::Dropout { p } if *p > 0.0)
    }

    /// Shapes of the learnable tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                axes,
                shared_axes,
            } => {
                let sets = if shared_axes { 1 } else { axes };
                vec![
                    vec![sets * out_channels, in_channels, kernel],
                    vec![sets * out_channels],
                ]
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => vec![
                vec![out_channels, in_channels, kernel[0], kernel[1]],
                vec![out_channels],
            ],
            LayerSpec::BatchNorm { channels, .. } => vec![vec![channels], vec![channels]],
            LayerSpec::Dense { inputs, units, .. } => vec![vec![units, inputs], vec![units]],
            _ => Vec::new(),
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            LayerSpec::Conv1d { .. } | LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                &["weight", "bias"]
            }
            LayerSpec::BatchNorm { .. } => &["gamma", "beta"],
            _ => &[],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Checks hyperparameters that do not depend on the input.
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::spec(self.name(), r));
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                axes,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || axes == 0 {
                    return bad("channel, kernel and axis counts must be positive");
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel.contains(&0) {
                    return bad("channel and kernel extents must be positive");
                }
            }
            LayerSpec::BatchNorm {
                channels,
                momentum,
                epsilon,
            } => {
                if channels == 0 || !(0.0..1.0).contains(&momentum) || epsilon <= 0.0 {
                    return bad("need channels > 0, momentum in [0,1), epsilon > 0");
                }
            }
            LayerSpec::MaxPool1d { size } => {
                if size == 0 {
                    return bad("pool size must be positive");
                }
            }
            LayerSpec::MaxPool2d { size } => {
                if size.contains(&0) {
                    return bad("pool extents must be positive");
                }
            }
            LayerSpec::Dense {
                inputs,
                units,
                weight_decay,
            } => {
                if inputs == 0 || units == 0 || weight_decay < 0.0 {
                    return bad("need inputs, units > 0 and weight_decay >= 0");
                }
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return bad("dropout probability must lie in [0, 1)");
                }
            }
            LayerSpec::ConcatAxes { axes } => {
                if axes == 0 {
                    return bad("axis count must be positive");
                }
            }
            LayerSpec::Relu | LayerSpec::Softmax => {}
        }
        Ok(())
    }

    /// Per-sample output shape for a per-sample input shape (batch extent excluded).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let name = self.name();
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                axes,
                ..
            } => {
                if input.len() != 2 || input[0] != axes * in_channels {
                    return Err(Error::shape(name, &[axes * in_channels, 0], input));
                }
                if kernel > input[1] {
                    return Err(Error::spec(
                        name,
                        format!("kernel {kernel} exceeds length {}", input[1]),
                    ));
                }
                Ok(vec![axes * out_channels, input[1]])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::shape(name, &[in_channels, 0, 0], input));
                }
                if kernel[0] > input[1] || kernel[1] > input[2] {
                    return Err(Error::spec(
                        name,
                        format!("kernel {kernel:?} exceeds input {:?}", &input[1..]),
                    ));
                }
                Ok(vec![out_channels, input[1], input[2]])
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if input.is_empty() || !input[0].is_multiple_of(channels) {
                    return Err(Error::shape(name, &[channels], input));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool1d { size } => {
                if input.len() != 2 || input[1] < size {
                    return Err(Error::shape(
                        name,
                        &[input.first().copied().unwrap_or(0), size],
                        input,
                    ));
                }
                Ok(vec![input[0], input[1] / size])
            }
            LayerSpec::MaxPool2d { size } => {
                if input.len() != 3 || input[1] < size[0] || input[2] < size[1] {
                    return Err(Error::shape(
                        name,
                        &[input.first().copied().unwrap_or(0), size[0], size[1]],
                        input,
                    ));
                }
                Ok(vec![input[0], input[1] / size[0], input[2] / size[1]])
            }
            LayerSpec::Dense { inputs, units, .. } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(Error::shape(name, &[inputs], input));
                }
                Ok(vec![units])
            }
            LayerSpec::Dropout { .. } | LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(Error::shape(name, &[0], input));
                }
                Ok(input.to_vec())
            }
            LayerSpec::ConcatAxes { axes } => {
                if input.len() != 2 || !input[0].is_multiple_of(axes) {
                    return Err(Error::shape(name, &[axes, 0], input));
                }
                Ok(vec![input[0] / axes, axes, input[1]])
            }
        }
    }

    fn check_params(&self, params: &[Tensor]) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::spec(
                self.name(),
                format!(
                    "expected {} parameter tensors, got {}",
                    shapes.len(),
                    params.len()
                ),
            ));
        }
        for (s, p) in shapes.iter().zip(params) {
            if p.shape() != s.as_slice() {
                return Err(Error::shape(
                    format!("{} parameters", self.name()),
                    s,
                    p.shape(),
                ));
            }
        }
        Ok(())
    }
}

fn same_pad(k: usize) -> usize {
    (k - 1) / 2
}

/// Valid output positions `o` for kernel tap `t` with left padding `pad` on an
/// axis of length `len`: those where `o + t - pad` falls inside the input.
fn tap_range(t: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(t);
    let hi = (len + pad).saturating_sub(t).min(len);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward_block(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    len: usize,
    y: &mut [f64],
) {
    let pad = same_pad(k);
    for co in 0..cout {
        let yo = &mut y[co * len..(co + 1) * len];
        yo.fill(b[co]);
        for ci in 0..cin {
            let xi = &x[ci * len..(ci + 1) * len];
            for t in 0..k {
                let wv = w[(co * cin + ci) * k + t];
                let (lo, hi) = tap_range(t, pad, len);
                let shift = lo + t - pad;
                for (yv, xv) in yo[lo..hi].iter_mut().zip(&xi[shift..shift + (hi - lo)]) {
                    *yv += wv * xv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_block(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    len: usize,
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let pad = same_pad(k);
    for co in 0..cout {
        let go = &g[co * len..(co + 1) * len];
        gb[co] += go.iter().sum::<f64>();
        for ci in 0..cin {
            let xi = &x[ci * len..(ci + 1) * len];
            let gxi = &mut gx[ci * len..(ci + 1) * len];
            for t in 0..k {
                let widx = (co * cin + ci) * k + t;
                let wv = w[widx];
                let (lo, hi) = tap_range(t, pad, len);
                let shift = lo + t - pad;
                let n = hi - lo;
                let mut acc = 0.0;
                for ((gv, xv), gxv) in go[lo..hi]
                    .iter()
                    .zip(&xi[shift..shift + n])
                    .zip(&mut gxi[shift..shift + n])
                {
                    acc += gv * xv;
                    *gxv += wv * gv;
                }
                gw[widx] += acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward_block(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    kernel: [usize; 2],
    h: usize,
    wd: usize,
    y: &mut [f64],
) {
    let (ph, pw) = (same_pad(kernel[0]), same_pad(kernel[1]));
    let plane = h * wd;
    for co in 0..cout {
        let yo = &mut y[co * plane..(co + 1) * plane];
        yo.fill(b[co]);
        for ci in 0..cin {
            let xi = &x[ci * plane..(ci + 1) * plane];
            for i in 0..kernel[0] {
                let (hlo, hhi) = tap_range(i, ph, h);
                for j in 0..kernel[1] {
                    let wv = w[((co * cin + ci) * kernel[0] + i) * kernel[1] + j];
                    let (wlo, whi) = tap_range(j, pw, wd);
                    let n = whi - wlo;
                    for oh in hlo..hhi {
                        let ih = oh + i - ph;
                        let iw = wlo + j - pw;
                        let yrow = &mut yo[oh * wd + wlo..oh * wd + whi];
                        let xrow = &xi[ih * wd + iw..ih * wd + iw + n];
                        for (yv, xv) in yrow.iter_mut().zip(xrow) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_block(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    cin: usize,
    cout: usize,
    kernel: [usize; 2],
    h: usize,
    wd: usize,
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let (ph, pw) = (same_pad(kernel[0]), same_pad(kernel[1]));
    let plane = h * wd;
    for co in 0..cout {
        let go = &g[co * plane..(co + 1) * plane];
        gb[co] += go.iter().sum::<f64>();
        for ci in 0..cin {
            let xi = &x[ci * plane..(ci + 1) * plane];
            let gxi = &mut gx[ci * plane..(ci + 1) * plane];
            for i in 0..kernel[0] {
                let (hlo, hhi) = tap_range(i, ph, h);
                for j in 0..kernel[1] {
                    let widx = ((co * cin + ci) * kernel[0] + i) * kernel[1] + j;
                    let wv = w[widx];
                    let (wlo, whi) = tap_range(j, pw, wd);
                    let n = whi - wlo;
                    let mut acc = 0.0;
                    for oh in hlo..hhi {
                        let ih = oh + i - ph;
                        let iw = wlo + j - pw;
                        let grow = &go[oh * wd + wlo..oh * wd + whi];
                        let xrow = &xi[ih * wd + iw..ih * wd + iw + n];
                        let gxrow = &mut gxi[ih * wd + iw..ih * wd + iw + n];
                        for ((gv, xv), gxv) in grow.iter().zip(xrow).zip(gxrow) {
                            acc += gv * xv;
                            *gxv += wv * gv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
}

fn check_input(spec: &LayerSpec, input: &Tensor) -> Result<Vec<usize>> {
    if input.shape().len() < 2 {
        return Err(Error::shape(spec.name(), &[0, 0], input.shape()));
    }
    let mut out = vec![input.batch()];
    out.extend(spec.output_shape(&input.shape()[1..])?);
    Ok(out)
}

/// Runs one layer on a batch.
///
/// `rngs` carries one stream per batch row for dropout layers that are
/// active in `mode`; other layers ignore it. `running` is required by
/// batchnorm in the eval modes.
pub fn forward(
    spec: &LayerSpec,
    params: &[Tensor],
    running: Option<&RunningStats>,
    input: &Tensor,
    mode: Mode,
    rngs: &[RngStream],
) -> Result<(Tensor, Cache)> {
    spec.check_params(params)?;
    let out_shape = check_input(spec, input)?;
    let n = input.batch();
    let x = input.data();
    let mut y = Tensor::zeros(&out_shape);
    let cache = match *spec {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel,
            axes,
            shared_axes,
        } => {
            let len = input.shape()[2];
            let (w, b) = (params[0].data(), params[1].data());
            let wset = out_channels * in_channels * kernel;
            let (xin, yout) = (in_channels * len, out_channels * len);
            let yd = y.data_mut();
            for s in 0..n * axes {
                let a = if shared_axes { 0 } else { s % axes };
                conv1d_forward_block(
                    &x[s * xin..(s + 1) * xin],
                    &w[a * wset..(a + 1) * wset],
                    &b[a * out_channels..(a + 1) * out_channels],
                    in_channels,
                    out_channels,
                    kernel,
                    len,
                    &mut yd[s * yout..(s + 1) * yout],
                );
            }
            CacheInner::Conv1d {
                input: input.clone(),
            }
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            let (h, wd) = (input.shape()[2], input.shape()[3]);
            let (xin, yout) = (in_channels * h * wd, out_channels * h * wd);
            let yd = y.data_mut();
            for s in 0..n {
                conv2d_forward_block(
                    &x[s * xin..(s + 1) * xin],
                    params[0].data(),
                    params[1].data(),
                    in_channels,
                    out_channels,
                    kernel,
                    h,
                    wd,
                    &mut yd[s * yout..(s + 1) * yout],
                );
            }
            CacheInner::Conv2d {
                input: input.clone(),
            }
        }
        LayerSpec::BatchNorm {
            channels, epsilon, ..
        } => {
            let rows = input.shape()[1];
            let inner: usize = input.shape()[2..].iter().product();
            let (mean, var, batch) = if mode == Mode::Train {
                let count = (n * rows / channels * inner) as f64;
                let mut mean = vec![0.0; channels];
                for (blk, chunk) in x.chunks_exact(inner).enumerate() {
                    mean[blk % rows % channels] += chunk.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= count);
                let mut var = vec![0.0; channels];
                for (blk, chunk) in x.chunks_exact(inner).enumerate() {
                    let c = blk % rows % channels;
                    var[c] += chunk
                        .iter()
                        .map(|v| (v - mean[c]) * (v - mean[c]))
                        .sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean.clone(), var.clone(), Some((mean, var)))
            } else {
                let rs = running
                    .ok_or_else(|| Error::spec("batchnorm", "running statistics missing"))?;
                if rs.mean.len() != channels || rs.var.len() != channels {
                    return Err(Error::shape(
                        "batchnorm running statistics",
                        &[channels],
                        &[rs.mean.len()],
                    ));
                }
                (rs.mean.clone(), rs.var.clone(), None)
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
            let (gamma, beta) = (params[0].data(), params[1].data());
            let mut xhat = vec![0.0; x.len()];
            let yd = y.data_mut();
            for (blk, ((xc, hc), yc)) in x
                .chunks_exact(inner)
                .zip(xhat.chunks_exact_mut(inner))
                .zip(yd.chunks_exact_mut(inner))
                .enumerate()
            {
                let c = blk % rows % channels;
                for ((xv, hv), yv) in xc.iter().zip(hc.iter_mut()).zip(yc.iter_mut()) {
                    *hv = (xv - mean[c]) * inv_std[c];
                    *yv = gamma[c] * *hv + beta[c];
                }
            }
            CacheInner::BatchNorm {
                xhat,
                inv_std,
                in_shape: input.shape().to_vec(),
                batch,
            }
        }
        LayerSpec::MaxPool1d { size } => {
            let (rows, len) = (input.shape()[1], input.shape()[2]);
            let olen = len / size;
            let mut argmax = Vec::with_capacity(y.len());
            let yd = y.data_mut();
            for r in 0..n * rows {
                for o in 0..olen {
                    let base = r * len + o * size;
                    let mut best = base;
                    for i in base + 1..base + size {
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    yd[r * olen + o] = x[best];
                    argmax.push(best);
                }
            }
            CacheInner::MaxPool {
                argmax,
                in_shape: input.shape().to_vec(),
            }
        }
        LayerSpec::MaxPool2d { size } => {
            let (rows, h, wd) = (input.shape()[1], input.shape()[2], input.shape()[3]);
            let (oh, ow) = (h / size[0], wd / size[1]);
            let mut argmax = Vec::with_capacity(y.len());
            let yd = y.data_mut();
            let mut out = 0;
            for r in 0..n * rows {
                let plane = r * h * wd;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = plane + (i * size[0]) * wd + j * size[1];
                        for di in 0..size[0] {
                            for dj in 0..size[1] {
                                let idx = plane + (i * size[0] + di) * wd + j * size[1] + dj;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        yd[out] = x[best];
                        argmax.push(best);
                        out += 1;
                    }
                }
            }
            CacheInner::MaxPool {
                argmax,
                in_shape: input.shape().to_vec(),
            }
        }
        LayerSpec::Dense { inputs, units, .. } => {
            let (w, b) = (params[0].data(), params[1].data());
            let yd = y.data_mut();
            for s in 0..n {
                let xs = &x[s * inputs..(s + 1) * inputs];
                for u in 0..units {
                    let wr = &w[u * inputs..(u + 1) * inputs];
                    yd[s * units + u] = b[u] + wr.iter().zip(xs).map(|(a, c)| a * c).sum::<f64>();
                }
            }
            CacheInner::Dense {
                input: input.clone(),
            }
        }
        LayerSpec::Dropout { p } => {
            if mode == Mode::DeterministicEval || p == 0.0 {
                y.data_mut().copy_from_slice(x);
                CacheInner::Dropout { mask: None }
            } else {
                if rngs.len() != n {
                    return Err(Error::spec(
                        "dropout",
                        format!(
                            "need one random stream per batch row ({n}), got {}",
                            rngs.len()
                        ),
                    ));
                }
                let scale = 1.0 / (1.0 - p);
                let row = input.row_len();
                let mut mask = Vec::with_capacity(x.len());
                for stream in rngs {
                    let mut rng = stream.rng();
                    mask.extend(
                        (0..row).map(|_| if rng.random::<f64>() < p { 0.0 } else { scale }),
                    );
                }
                for ((yv, xv), m) in y.data_mut().iter_mut().zip(x).zip(&mask) {
                    *yv = xv * m;
                }
                CacheInner::Dropout { mask: Some(mask) }
            }
        }
        LayerSpec::Relu => {
            for (yv, xv) in y.data_mut().iter_mut().zip(x) {
                *yv = xv.max(0.0);
            }
            CacheInner::Relu {
                input: input.clone(),
            }
        }
        LayerSpec::Softmax => {
            let c = input.shape()[1];
            for (xs, ys) in x.chunks_exact(c).zip(y.data_mut().chunks_exact_mut(c)) {
                softmax_into(xs, ys);
            }
            CacheInner::Softmax { output: y.clone() }
        }
        LayerSpec::ConcatAxes { axes } => {
            let (rows, len) = (input.shape()[1], input.shape()[2]);
            let ch = rows / axes;
            let yd = y.data_mut();
            for s in 0..n {
                for a in 0..axes {
                    for c in 0..ch {
                        let src = ((s * axes + a) * ch + c) * len;
                        let dst = ((s * ch + c) * axes + a) * len;
                        yd[dst..dst + len].copy_from_slice(&x[src..src + len]);
                    }
                }
            }
            CacheInner::ConcatAxes {
                in_shape: input.shape().to_vec(),
            }
        }
    };
    Ok((y, Cache(cache)))
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Gradient of a layer's output w.r.t. its input and its parameters.
///
/// Dense layers add `weight_decay * w` to the weight gradient.
pub fn backward(
    spec: &LayerSpec,
    params: &[Tensor],
    cache: &Cache,
    grad_output: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    spec.check_params(params)?;
    let mismatch = || Error::CacheMismatch {
        layer: spec.name().to_string(),
    };
    if cache.0.kind() != spec.name() {
        return Err(mismatch());
    }
    let g = grad_output.data();
    let mut grads: Vec<Tensor> = spec
        .param_shapes()
        .iter()
        .map(|s| Tensor::zeros(s))
        .collect();
    let gin = match (spec, &cache.0) {
        (
            &LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                axes,
                shared_axes,
            },
            CacheInner::Conv1d { input },
        ) => {
            expect_grad_shape(spec, input.shape(), &check_input(spec, input)?, grad_output)?;
            let n = input.batch();
            let len = input.shape()[2];
            let wset = out_channels * in_channels * kernel;
            let (xin, yout) = (in_channels * len, out_channels * len);
            let mut gx = Tensor::zeros(input.shape());
            let (gw_t, gb_t) = grads.split_at_mut(1);
            let (gw, gb) = (gw_t[0].data_mut(), gb_t[0].data_mut());
            let w = params[0].data();
            let x = input.data();
            let gxd = gx.data_mut();
            for s in 0..n * axes {
                let a = if shared_axes { 0 } else { s % axes };
                conv1d_backward_block(
                    &x[s * xin..(s + 1) * xin],
                    &w[a * wset..(a + 1) * wset],
                    &g[s * yout..(s + 1) * yout],
                    in_channels,
                    out_channels,
                    kernel,
                    len,
                    &mut gxd[s * xin..(s + 1) * xin],
                    &mut gw[a * wset..(a + 1) * wset],
                    &mut gb[a * out_channels..(a + 1) * out_channels],
                );
            }
            gx
        }
        (
            &LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            },
            CacheInner::Conv2d { input },
        ) => {
            expect_grad_shape(spec, input.shape(), &check_input(spec, input)?, grad_output)?;
            let n = input.batch();
            let (h, wd) = (input.shape()[2], input.shape()[3]);
            let (xin, yout) = (in_channels * h * wd, out_channels * h * wd);
            let mut gx = Tensor::zeros(input.shape());
            let (gw_t, gb_t) = grads.split_at_mut(1);
            let x = input.data();
            let gxd = gx.data_mut();
            for s in 0..n {
                conv2d_backward_block(
                    &x[s * xin..(s + 1) * xin],
                    params[0].data(),
                    &g[s * yout..(s + 1) * yout],
                    in_channels,
                    out_channels,
                    kernel,
                    h,
                    wd,
                    &mut gxd[s * xin..(s + 1) * xin],
                    gw_t[0].data_mut(),
                    gb_t[0].data_mut(),
                );
            }
            gx
        }
        (
            &LayerSpec::BatchNorm { channels, .. },
            CacheInner::BatchNorm {
                xhat,
                inv_std,
                in_shape,
                batch,
            },
        ) => {
            expect_grad_shape(spec, in_shape, in_shape, grad_output)?;
            let rows = in_shape[1];
            let inner: usize = in_shape[2..].iter().product();
            let gamma = params[0].data();
            let mut sum_g = vec![0.0; channels];
            let mut sum_gx = vec![0.0; channels];
            for (blk, (gc, hc)) in g
                .chunks_exact(inner)
                .zip(xhat.chunks_exact(inner))
                .enumerate()
            {
                let c = blk % rows % channels;
                sum_g[c] += gc.iter().sum::<f64>();
                sum_gx[c] += gc.iter().zip(hc).map(|(a, b)| a * b).sum::<f64>();
            }
            grads[0].data_mut().copy_from_slice(&sum_gx);
            grads[1].data_mut().copy_from_slice(&sum_g);
            let mut gx = Tensor::zeros(in_shape);
            let count = (in_shape[0] * rows / channels * inner) as f64;
            for (blk, ((gc, hc), oc)) in g
                .chunks_exact(inner)
                .zip(xhat.chunks_exact(inner))
                .zip(gx.data_mut().chunks_exact_mut(inner))
                .enumerate()
            {
                let c = blk % rows % channels;
                let k = gamma[c] * inv_std[c];
                if batch.is_some() {
                    let (mg, mgx) = (sum_g[c] / count, sum_gx[c] / count);
                    for ((gv, hv), ov) in gc.iter().zip(hc).zip(oc.iter_mut()) {
                        *ov = k * (gv - mg - hv * mgx);
                    }
                } else {
                    for (gv, ov) in gc.iter().zip(oc.iter_mut()) {
                        *ov = k * gv;
                    }
                }
            }
            gx
        }
        (
            LayerSpec::MaxPool1d { .. } | LayerSpec::MaxPool2d { .. },
            CacheInner::MaxPool { argmax, in_shape },
        ) => {
            if grad_output.len() != argmax.len() {
                return Err(Error::shape(
                    spec.name(),
                    &[argmax.len()],
                    grad_output.shape(),
                ));
            }
            let mut gx = Tensor::zeros(in_shape);
            let gxd = gx.data_mut();
            for (&i, gv) in argmax.iter().zip(g) {
                gxd[i] += gv;
            }
            gx
        }
        (
            &LayerSpec::Dense {
                inputs,
                units,
                weight_decay,
            },
            CacheInner::Dense { input },
        ) => {
            let n = input.batch();
            expect_grad_shape(spec, input.shape(), &[n, units], grad_output)?;
            let x = input.data();
            let w = params[0].data();
            let mut gx = Tensor::zeros(input.shape());
            {
                let gw = grads[0].data_mut();
                for s in 0..n {
                    let xs = &x[s * inputs..(s + 1) * inputs];
                    for u in 0..units {
                        let gv = g[s * units + u];
                        for (gwv, xv) in gw[u * inputs..(u + 1) * inputs].iter_mut().zip(xs) {
                            *gwv += gv * xv;
                        }
                    }
                }
                if weight_decay > 0.0 {
                    for (gwv, wv) in gw.iter_mut().zip(w) {
                        *gwv += weight_decay * wv;
                    }
                }
            }
            let gb = grads[1].data_mut();
            let gxd = gx.data_mut();
            for s in 0..n {
                let gxs = &mut gxd[s * inputs..(s + 1) * inputs];
                for u in 0..units {
                    let gv = g[s * units + u];
                    gb[u] += gv;
                    for (gxv, wv) in gxs.iter_mut().zip(&w[u * inputs..(u + 1) * inputs]) {
                        *gxv += gv * wv;
                    }
                }
            }
            gx
        }
        (LayerSpec::Dropout { .. }, CacheInner::Dropout { mask }) => {
            let mut gx = grad_output.clone();
            if let Some(mask) = mask {
                if mask.len() != g.len() {
                    return Err(Error::shape("dropout", &[mask.len()], grad_output.shape()));
                }
                gx.data_mut()
                    .iter_mut()
                    .zip(mask)
                    .for_each(|(v, m)| *v *= m);
            }
            gx
        }
        (LayerSpec::Relu, CacheInner::Relu { input }) => {
            expect_grad_shape(spec, input.shape(), input.shape(), grad_output)?;
            let mut gx = grad_output.clone();
            gx.data_mut()
                .iter_mut()
                .zip(input.data())
                .for_each(|(v, x)| {
                    if *x <= 0.0 {
                        *v = 0.0
                    }
                });
            gx
        }
        (LayerSpec::Softmax, CacheInner::Softmax { output }) => {
            expect_grad_shape(spec, output.shape(), output.shape(), grad_output)?;
            let c = output.shape()[1];
            let mut gx = Tensor::zeros(output.shape());
            for ((ys, gs), os) in output
                .data()
                .chunks_exact(c)
                .zip(g.chunks_exact(c))
                .zip(gx.data_mut().chunks_exact_mut(c))
            {
                let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for ((o, y), gv) in os.iter_mut().zip(ys).zip(gs) {
                    *o = y * (gv - dot);
                }
            }
            gx
        }
        (&LayerSpec::ConcatAxes { axes }, CacheInner::ConcatAxes { in_shape }) => {
            let (n, rows, len) = (in_shape[0], in_shape[1], in_shape[2]);
            let ch = rows / axes;
            if grad_output.shape() != [n, ch, axes, len] {
                return Err(Error::shape(
                    "concat-axes",
                    &[n, ch, axes, len],
                    grad_output.shape(),
                ));
            }
            let mut gx = Tensor::zeros(in_shape);
            let gxd = gx.data_mut();
            for s in 0..n {
                for a in 0..axes {
                    for c in 0..ch {
                        let dst = ((s * axes + a) * ch + c) * len;
                        let src = ((s * ch + c) * axes + a) * len;
                        gxd[dst..dst + len].copy_from_slice(&g[src..src + len]);
                    }
                }
            }
            gx
        }
        _ => return Err(mismatch()),
    };
    Ok((gin, grads))
}

fn expect_grad_shape(spec: &LayerSpec, _in: &[usize], out: &[usize], grad: &Tensor) -> Result<()> {
    if grad.shape() != out {
        return Err(Error::shape(
            format!("{} backward", spec.name()),
            out,
            grad.shape(),
        ));
    }
    Ok(())
}
