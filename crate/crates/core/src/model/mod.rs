//! The Bayesian HARNet classifier: per-axis 1-D convolutions, a 2-D
//! convolution stack mixing the axes, and a dropout-guarded dense head.

mod bundle;

pub use bundle::{FORMAT_VERSION, MAGIC};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, LayerSpec, Mode, Network, Tensor};
use crate::rng::{domain, RngStream};
use crate::signal::{FeatureWindow, Standardizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnetConfig {
    /// Samples per axis after preprocessing.
    pub input_length: usize,
    pub num_axes: usize,
    pub num_classes: usize,
    pub conv1d_filters: [usize; 2],
    pub conv1d_kernel: usize,
    pub pool1d: usize,
    pub conv2d_filters: [usize; 2],
    pub conv2d_kernel: [usize; 2],
    pub pool2d: [usize; 2],
    pub dense_units: [usize; 2],
    pub dropout_p: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    /// Share the 1-D convolution weights across axes.
    pub shared_axis_weights: bool,
    pub batchnorm_momentum: f64,
    pub batchnorm_epsilon: f64,
    /// Per-axis input standardization fitted on training windows; off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_standardizer: Option<Standardizer>,
}

impl Default for HarnetConfig {
    fn default() -> Self {
        Self {
            input_length: 100,
            num_axes: 3,
            num_classes: 6,
            conv1d_filters: [8, 16],
            conv1d_kernel: 2,
            pool1d: 2,
            conv2d_filters: [8, 16],
            conv2d_kernel: [3, 3],
            pool2d: [3, 2],
            dense_units: [16, 8],
            dropout_p: 0.3,
            weight_decay: 1e-4,
            learning_rate: 2e-4,
            shared_axis_weights: true,
            batchnorm_momentum: 0.9,
            batchnorm_epsilon: 1e-6,
            input_standardizer: None,
        }
    }
}

impl HarnetConfig {
    pub fn with_classes(num_classes: usize, input_length: usize) -> Self {
        Self {
            num_classes,
            input_length,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    fn layer_specs(&self, flatten: usize) -> Vec<LayerSpec> {
        let axes = self.num_axes;
        let [f1, f2] = self.conv1d_filters;
        let [g1, g2] = self.conv2d_filters;
        let [d1, d2] = self.dense_units;
        let bn1 = if self.shared_axis_weights {
            f2
        } else {
            axes * f2
        };
        let bn = |channels| LayerSpec::BatchNorm {
            channels,
            momentum: self.batchnorm_momentum,
            epsilon: self.batchnorm_epsilon,
        };
        let dense = |inputs, units| LayerSpec::Dense {
            inputs,
            units,
            weight_decay: self.weight_decay,
        };
        let drop = LayerSpec::Dropout { p: self.dropout_p };
        vec![
            LayerSpec::Conv1d {
                in_channels: 1,
                out_channels: f1,
                kernel: self.conv1d_kernel,
                axes,
                shared_axes: self.shared_axis_weights,
            },
            LayerSpec::Conv1d {
                in_channels: f1,
                out_channels: f2,
                kernel: self.conv1d_kernel,
                axes,
                shared_axes: self.shared_axis_weights,
            },
            bn(bn1),
            LayerSpec::MaxPool1d { size: self.pool1d },
            LayerSpec::ConcatAxes { axes },
            LayerSpec::Conv2d {
                in_channels: f2,
                out_channels: g1,
                kernel: self.conv2d_kernel,
            },
            LayerSpec::Conv2d {
                in_channels: g1,
                out_channels: g2,
                kernel: self.conv2d_kernel,
            },
            bn(g2),
            LayerSpec::MaxPool2d { size: self.pool2d },
            drop.clone(),
            dense(flatten, d1),
            LayerSpec::Relu,
            drop.clone(),
            dense(d1, d2),
            LayerSpec::Relu,
            drop,
            dense(d2, self.num_classes),
            LayerSpec::Softmax,
        ]
    }

    /// Builds the layer stack, naming the first stage the input cannot pass.
    pub fn network(&self) -> Result<Network> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.num_axes == 0 {
            return Err(Error::Config("need at least one axis".into()));
        }
        // Walk the shapes with a placeholder flatten size to find it.
        let specs = self.layer_specs(1);
        let input = vec![self.num_axes, self.input_length];
        let mut shape = input.clone();
        let mut flatten = 0;
        for (i, spec) in specs.iter().enumerate() {
            if let LayerSpec::Dense { .. } = spec {
                flatten = shape.iter().product();
                break;
            }
            shape = spec.output_shape(&shape).map_err(|e| match e {
                Error::Shape { .. } | Error::InvalidSpec { .. } if self.input_length > 0 => {
                    Error::InputTooShort {
                        input_length: self.input_length,
                        stage: format!("layer{i:02} {}: {e}", spec.name()),
                    }
                }
                other => other,
            })?;
            if shape.contains(&0) {
                return Err(Error::InputTooShort {
                    input_length: self.input_length,
                    stage: format!("layer{i:02} {}", spec.name()),
                });
            }
        }
        if flatten == 0 {
            return Err(Error::InputTooShort {
                input_length: self.input_length,
                stage: "flatten".into(),
            });
        }
        Network::new(input, self.layer_specs(flatten))
    }
}

/// Architecture, learned state and (optionally) optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: HarnetConfig,
    pub network: Network,
    pub optimizer: Option<AdamState>,
}

fn glorot_limit(spec: &LayerSpec) -> f64 {
    let (fan_in, fan_out) = match *spec {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => (in_channels * kernel, out_channels * kernel),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            let k = kernel[0] * kernel[1];
            (in_channels * k, out_channels * k)
        }
        LayerSpec::Dense { inputs, units, .. } => (inputs, units),
        _ => return 0.0,
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ModelBundle {
    /// Fresh model: Glorot-uniform weights from the seeded stream, zero biases,
    /// unit batchnorm scales.
    pub fn build(config: HarnetConfig, seed: u64) -> Result<Self> {
        let mut network = config.network()?;
        let root = RngStream::root(seed, domain::INIT);
        for (i, layer) in network.layers.iter_mut().enumerate() {
            match layer.spec {
                LayerSpec::BatchNorm { .. } => layer.params[0].data_mut().fill(1.0),
                LayerSpec::Conv1d { .. } | LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                    let limit = glorot_limit(&layer.spec);
                    let mut rng = root.derive(i as u64).rng();
                    for w in layer.params[0].data_mut() {
                        *w = rng.random_range(-limit..limit);
                    }
                }
                _ => {}
            }
        }
        Ok(Self {
            config,
            network,
            optimizer: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.network.param_count()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Per-sample input shape `[axes, length]`.
    pub fn input_shape(&self) -> [usize; 2] {
        [self.config.num_axes, self.config.input_length]
    }

    /// Optimizer state, created on first use.
    pub fn optimizer_mut(&mut self) -> &mut AdamState {
        let shapes = self.network.param_shapes();
        let adam = self.config.adam();
        self.optimizer
            .get_or_insert_with(|| AdamState::new(adam, &shapes))
    }

    /// Batch input tensor `[N, axes, length]` for feature windows.
    pub fn input_tensor(&self, windows: &[&FeatureWindow]) -> Result<Tensor> {
        let [axes, len] = self.input_shape();
        let mut data = Vec::with_capacity(windows.len() * axes * len);
        for w in windows {
            if w.coefficients.len() != axes * len {
                return Err(Error::shape(
                    format!("window {}", w.id),
                    &[axes, len],
                    &[w.coefficients.len()],
                ));
            }
            let start = data.len();
            data.extend_from_slice(&w.coefficients);
            if let Some(s) = &self.config.input_standardizer {
                s.apply(&mut data[start..]);
            }
        }
        Tensor::new(vec![windows.len(), axes, len], data)
    }

    /// Class probabilities with dropout off.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.network.forward(input, Mode::DeterministicEval, &[])
    }

    /// Same model with every tensor rounded through `f32`, i.e. the value a
    /// save/load round trip yields.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        let q = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        for l in &mut out.network.layers {
            l.params.iter_mut().for_each(q);
            if let Some(rs) = l.running.as_mut() {
                rs.mean
                    .iter_mut()
                    .chain(rs.var.iter_mut())
                    .for_each(|v| *v = *v as f32 as f64);
            }
        }
        if let Some(opt) = out.optimizer.as_mut() {
            opt.first
                .iter_mut()
                .chain(opt.second.iter_mut())
                .for_each(q);
        }
        out
    }

    /// Copy of the model with a different dropout probability.
    pub fn with_dropout(&self, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let mut out = self.clone();
        out.config.dropout_p = p;
        for l in &mut out.network.layers {
            if let LayerSpec::Dropout { p: lp } = &mut l.spec {
                *lp = p;
            }
        }
        Ok(out)
    }
}
