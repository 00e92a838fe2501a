use super::adam::AdamState;
use super::layer::{self, Cache, LayerSpec, Mode, RunningStats};
use super::loss::{cross_entropy, softmax_cross_entropy_grad};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
    pub running: Option<RunningStats>,
}

impl Layer {
    pub fn new(spec: LayerSpec) -> Self {
        let params = spec
            .param_shapes()
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        let running = match spec {
            LayerSpec::BatchNorm { channels, .. } => Some(RunningStats::new(channels)),
            _ => None,
        };
        Self {
            spec,
            params,
            running,
        }
    }
}

/// A feed-forward stack of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Builds a zero-initialized network, validating every shape transition.
    pub fn new(input_shape: Vec<usize>, specs: Vec<LayerSpec>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for spec in &specs {
            shape = spec.output_shape(&shape)?;
        }
        Ok(Self {
            input_shape,
            layers: specs.into_iter().map(Layer::new).collect(),
        })
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            shape = l.spec.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// `layerNN.kind.param` names for all learnable tensors, in storage order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for p in l.spec.param_names() {
                names.push(format!("layer{i:02}.{}.{p}", l.spec.name()));
            }
        }
        names
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| l.spec.param_shapes())
            .collect()
    }

    /// Index of the first layer that injects randomness; everything before it
    /// is deterministic outside train mode.
    pub fn stochastic_start(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.spec.is_stochastic())
            .unwrap_or(self.layers.len())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape().len() != self.input_shape.len() + 1
            || input.shape()[1..] != self.input_shape[..]
        {
            let mut expected = vec![input.shape().first().copied().unwrap_or(0)];
            expected.extend(&self.input_shape);
            return Err(Error::shape("network input", &expected, input.shape()));
        }
        Ok(())
    }

    /// Runs layers `from..to` without keeping caches.
    ///
    /// `streams` holds one stream per batch row; layer `i` uses
    /// `streams[row].derive(i)`.
    pub fn forward_range(
        &self,
        from: usize,
        to: usize,
        input: Tensor,
        mode: Mode,
        streams: &[RngStream],
    ) -> Result<Tensor> {
        let mut x = input;
        for (i, l) in self.layers.iter().enumerate().take(to).skip(from) {
            let layer_streams = derive_streams(&l.spec, mode, streams, i);
            x = layer::forward(
                &l.spec,
                &l.params,
                l.running.as_ref(),
                &x,
                mode,
                &layer_streams,
            )?
            .0;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &Tensor, mode: Mode, streams: &[RngStream]) -> Result<Tensor> {
        self.check_input(input)?;
        self.forward_range(0, self.layers.len(), input.clone(), mode, streams)
    }

    /// Forward pass keeping every cache, for a subsequent backward pass.
    pub fn forward_with_caches(
        &self,
        input: &Tensor,
        mode: Mode,
        streams: &[RngStream],
    ) -> Result<(Tensor, Vec<Cache>)> {
        self.check_input(input)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let layer_streams = derive_streams(&l.spec, mode, streams, i);
            let (y, c) = layer::forward(
                &l.spec,
                &l.params,
                l.running.as_ref(),
                &x,
                mode,
                &layer_streams,
            )?;
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    /// Backpropagates `grad` from the output of layer `upto - 1` down to the
    /// input. Returns the input gradient and per-layer parameter gradients.
    pub fn backward_from(
        &self,
        caches: &[Cache],
        upto: usize,
        grad: Tensor,
    ) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
        let mut g = grad;
        let mut grads = vec![Vec::new(); self.layers.len()];
        for i in (0..upto).rev() {
            let l = &self.layers[i];
            let (gx, gp) = layer::backward(&l.spec, &l.params, &caches[i], &g)?;
            grads[i] = gp;
            g = gx;
        }
        Ok((g, grads))
    }

    /// One optimizer step on a batch. The network must end in softmax; the
    /// softmax/cross-entropy gradient is fused. Returns the mean loss.
    pub fn train_step(
        &mut self,
        adam: &mut AdamState,
        input: &Tensor,
        targets: &[usize],
        streams: &[RngStream],
    ) -> Result<f64> {
        let last = self.layers.len();
        if last == 0 || self.layers[last - 1].spec != LayerSpec::Softmax {
            return Err(Error::Config(
                "training requires a trailing softmax layer".into(),
            ));
        }
        if targets.len() != input.batch() {
            return Err(Error::shape("targets", &[input.batch()], &[targets.len()]));
        }
        let (probs, caches) = self.forward_with_caches(input, Mode::Train, streams)?;
        let classes = probs.shape()[1];
        let mut loss = 0.0;
        for (row, &t) in probs.data().chunks_exact(classes).zip(targets) {
            loss += cross_entropy(row, t)?;
        }
        loss /= targets.len() as f64;
        let g = softmax_cross_entropy_grad(probs.data(), classes, targets)?;
        let g = Tensor::new(probs.shape().to_vec(), g)?;
        let (_, grads) = self.backward_from(&caches, last - 1, g)?;

        for (l, c) in self.layers.iter_mut().zip(&caches) {
            if let (LayerSpec::BatchNorm { momentum, .. }, Some(rs)) = (&l.spec, l.running.as_mut())
            {
                rs.update(c, *momentum);
            }
        }
        let names = self.param_names();
        let flat_grads: Vec<Tensor> = grads.into_iter().flatten().collect();
        let mut params: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect();
        adam.step(&mut params, &flat_grads, &names)?;
        Ok(loss)
    }
}

fn derive_streams(
    spec: &LayerSpec,
    mode: Mode,
    streams: &[RngStream],
    index: usize,
) -> Vec<RngStream> {
    if spec.is_stochastic() && mode != Mode::DeterministicEval {
        streams.iter().map(|s| s.derive(index as u64)).collect()
    } else {
        Vec::new()
    }
}
