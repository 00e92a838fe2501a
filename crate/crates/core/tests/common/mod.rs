#![allow(dead_code)]

use activehar::data::{preprocess_and_store, synthetic, PrepParams, SyntheticConfig, WindowStore};
use activehar::nn::{backward, forward, LayerSpec, Mode, RunningStats, Tensor};
use activehar::RngStream;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A random small configuration of one layer kind with its input shape.
/// `kind` is one of the names in [`LAYER_KINDS`].
pub fn random_layer(kind: &str, rng: &mut ChaCha8Rng) -> (LayerSpec, Vec<usize>, Mode) {
    let n = rng.random_range(1..=3);
    match kind {
        "conv1d" => {
            let (cin, axes, len) = (
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(3..=8),
            );
            let spec = LayerSpec::Conv1d {
                in_channels: cin,
                out_channels: rng.random_range(1..=3),
                kernel: rng.random_range(1..=4.min(len)),
                axes,
                shared_axes: rng.random_bool(0.5),
            };
            (spec, vec![n, axes * cin, len], Mode::Train)
        }
        "conv2d" => {
            let (cin, h, w) = (
                rng.random_range(1..=3),
                rng.random_range(2..=4),
                rng.random_range(3..=6),
            );
            let spec = LayerSpec::Conv2d {
                in_channels: cin,
                out_channels: rng.random_range(1..=3),
                kernel: [rng.random_range(1..=3.min(h)), rng.random_range(1..=3)],
            };
            (spec, vec![n, cin, h, w], Mode::Train)
        }
        "batchnorm" => {
            let channels = rng.random_range(1..=3);
            let spec = LayerSpec::BatchNorm {
                channels,
                momentum: 0.9,
                epsilon: 1e-6,
            };
            let x = channels * rng.random_range(1..=2);
            (spec, vec![n + 1, x, rng.random_range(2..=5)], Mode::Train)
        }
        "maxpool1d" => {
            let spec = LayerSpec::MaxPool1d {
                size: rng.random_range(1..=3),
            };
            (
                spec,
                vec![n, rng.random_range(1..=3), rng.random_range(3..=9)],
                Mode::Train,
            )
        }
        "maxpool2d" => {
            let spec = LayerSpec::MaxPool2d {
                size: [rng.random_range(1..=2), rng.random_range(1..=3)],
            };
            (
                spec,
                vec![
                    n,
                    rng.random_range(1..=2),
                    rng.random_range(2..=4),
                    rng.random_range(3..=7),
                ],
                Mode::Train,
            )
        }
        "dense" => {
            let (a, b) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let spec = LayerSpec::Dense {
                inputs: a * b,
                units: rng.random_range(1..=4),
                weight_decay: if rng.random_bool(0.5) { 0.0 } else { 1e-2 },
            };
            (spec, vec![n, a, b], Mode::Train)
        }
        "dropout" => {
            let spec = LayerSpec::Dropout {
                p: rng.random_range(0.1..0.6),
            };
            (
                spec,
                vec![n, rng.random_range(1..=3), rng.random_range(2..=6)],
                Mode::Train,
            )
        }
        "relu" => (
            LayerSpec::Relu,
            vec![n, rng.random_range(1..=3), rng.random_range(2..=6)],
            Mode::Train,
        ),
        "softmax" => (
            LayerSpec::Softmax,
            vec![n, rng.random_range(2..=6)],
            Mode::Train,
        ),
        "concat-axes" => {
            let axes = rng.random_range(1..=3);
            let c = rng.random_range(1..=3);
            (
                LayerSpec::ConcatAxes { axes },
                vec![n, axes * c, rng.random_range(2..=5)],
                Mode::Train,
            )
        }
        other => panic!("unknown layer kind {other}"),
    }
}

pub const LAYER_KINDS: [&str; 10] = [
    "conv1d",
    "conv2d",
    "batchnorm",
    "maxpool1d",
    "maxpool2d",
    "dense",
    "dropout",
    "relu",
    "softmax",
    "concat-axes",
];

/// Input values safe for finite differences: distinct by at least 0.01 for
/// max pooling, away from zero for relu.
fn fd_input(spec: &LayerSpec, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match spec {
        LayerSpec::MaxPool1d { .. } | LayerSpec::MaxPool2d { .. } => {
            let mut v: Vec<f64> = (0..len)
                .map(|i| i as f64 * 0.01 - 0.005 * len as f64)
                .collect();
            v.shuffle(rng);
            v
        }
        LayerSpec::Relu => (0..len)
            .map(|_| {
                let m = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
        _ => uniform(rng, len),
    }
}

fn objective(
    spec: &LayerSpec,
    params: &[Tensor],
    running: &RunningStats,
    x: &Tensor,
    mode: Mode,
    streams: &[RngStream],
    r: &[f64],
) -> f64 {
    let (y, _) = forward(spec, params, Some(running), x, mode, streams).unwrap();
    let mut f: f64 = y.data().iter().zip(r).map(|(a, b)| a * b).sum();
    if let LayerSpec::Dense { weight_decay, .. } = spec {
        f += 0.5 * weight_decay * params[0].data().iter().map(|w| w * w).sum::<f64>();
    }
    f
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = norm(analytic) + norm(numeric);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Largest relative error (per tensor, L2) between the analytic gradients of
/// input and parameters and central differences of `sum(r * y)` plus the
/// dense weight-decay term.
pub fn gradient_error(
    spec: &LayerSpec,
    in_shape: &[usize],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let params: Vec<Tensor> = spec
        .param_shapes()
        .iter()
        .map(|s| Tensor::new(s.clone(), uniform(rng, s.iter().product())).unwrap())
        .collect();
    let channels = match spec {
        LayerSpec::BatchNorm { channels, .. } => *channels,
        _ => 1,
    };
    let running = RunningStats::new(channels);
    let len: usize = in_shape.iter().product();
    let x = Tensor::new(in_shape.to_vec(), fd_input(spec, len, rng)).unwrap();
    let stream_seed: u64 = rng.random();
    let streams: Vec<RngStream> = (0..in_shape[0] as u64)
        .map(|i| RngStream::new(stream_seed, i))
        .collect();
    let mut out_shape = vec![in_shape[0]];
    out_shape.extend(spec.output_shape(&in_shape[1..]).unwrap());
    let r = uniform(rng, out_shape.iter().product());

    let (_, cache) = forward(spec, &params, Some(&running), &x, mode, &streams).unwrap();
    let g = Tensor::new(out_shape, r.clone()).unwrap();
    let (gx, gp) = backward(spec, &params, &cache, &g).unwrap();

    let f =
        |params: &[Tensor], x: &Tensor| objective(spec, params, &running, x, mode, &streams, &r);
    let mut worst: f64 = 0.0;

    let mut numeric = vec![0.0; len];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        *slot = (f(&params, &xp) - f(&params, &xm)) / (2.0 * FD_STEP);
    }
    worst = worst.max(rel_error(gx.data(), &numeric));

    for (t, analytic) in gp.iter().enumerate() {
        let mut numeric = vec![0.0; params[t].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut pp = params.clone();
            pp[t].data_mut()[i] += FD_STEP;
            let mut pm = params.clone();
            pm[t].data_mut()[i] -= FD_STEP;
            *slot = (f(&pp, &x) - f(&pm, &x)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    worst
}

/// Worst gradient error over `configs` random configurations of `kind`.
pub fn worst_gradient_error(kind: &str, configs: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 0xC4EC).rng();
    (0..configs)
        .map(|_| {
            let (spec, shape, mode) = random_layer(kind, &mut rng);
            gradient_error(&spec, &shape, mode, &mut rng)
        })
        .fold(0.0, f64::max)
}

/// Small synthetic store: `users` users, `classes` classes at 100 Hz.
pub fn small_store(
    users: usize,
    classes: usize,
    windows_per_class: usize,
    seed: u64,
) -> WindowStore {
    let cfg = SyntheticConfig::new(users, classes, windows_per_class, 100.0, seed);
    preprocess_and_store(
        &synthetic::generate(&cfg),
        &PrepParams::new(2.0, 100.0),
        "synthetic",
    )
    .unwrap()
}
