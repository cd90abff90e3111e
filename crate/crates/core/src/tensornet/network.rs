use rand::Rng;

use super::layers::{Layer, LayerCache, LayerKind};
use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

/// Activations cached by one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<LayerCache>,
    taps: Vec<Tensor>,
}

impl Trace {
    /// Activation recorded at the `i`-th tap.
    pub fn tap(&self, i: usize) -> &Tensor {
        &self.taps[i]
    }
}

/// A feed-forward stack of layers with optional named taps on
/// intermediate outputs.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    shapes: Vec<Vec<usize>>,
    layers: Vec<Layer>,
    taps: Vec<(String, usize)>,
    last: Option<Trace>,
    /// Fail with a divergence error when an activation becomes non-finite.
    pub check_finite: bool,
}

impl Network {
    pub fn new<R: Rng>(input_shape: &[usize], kinds: &[LayerKind], rng: &mut R) -> Result<Self> {
        let layers = kinds.iter().map(|&k| Layer::new(k, rng)).collect();
        Self::from_layers(input_shape, layers)
    }

    pub fn from_layers(input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        let mut shapes = vec![input_shape.to_vec()];
        for layer in &layers {
            let next = layer.kind.output_shape(shapes.last().unwrap())?;
            let fresh = Layer::zeroed(layer.kind);
            let same = |a: &Option<Param>, b: &Option<Param>| match (a, b) {
                (Some(a), Some(b)) => a.value.shape() == b.value.shape(),
                (None, None) => true,
                _ => false,
            };
            if !same(&layer.weight, &fresh.weight) || !same(&layer.bias, &fresh.bias) {
                return Err(Error::Config(format!("parameter shapes do not fit {:?}", layer.kind)));
            }
            shapes.push(next);
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            shapes,
            layers,
            taps: Vec::new(),
            last: None,
            check_finite: true,
        })
    }

    /// Names the output of layer `after` (0-based) so it can be read from a
    /// trace and receive extra gradient.
    pub fn add_tap(&mut self, name: &str, after: usize) -> Result<usize> {
        if after >= self.layers.len() {
            return Err(Error::Config(format!("tap {name:?} after missing layer {after}")));
        }
        if self.tap_index(name).is_some() {
            return Err(Error::Config(format!("duplicate tap {name:?}")));
        }
        self.taps.push((name.to_string(), after));
        Ok(self.taps.len() - 1)
    }

    pub fn tap_index(&self, name: &str) -> Option<usize> {
        self.taps.iter().position(|(n, _)| n == name)
    }

    pub fn taps(&self) -> &[(String, usize)] {
        &self.taps
    }

    pub fn tap_shape(&self, i: usize) -> &[usize] {
        &self.shapes[self.taps[i].1 + 1]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Param::zero_grad);
    }

    /// Forward pass that leaves the network untouched; the returned trace
    /// feeds [`Network::backward_traced`]. Lets one set of weights serve
    /// several inputs per step.
    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        x.expect_shape(&self.input_shape)
            .map_err(|e| Error::Config(format!("network input: {e}")))?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut taps = vec![Tensor::zeros(&[0]); self.taps.len()];
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&cur)?;
            if self.check_finite && !y.is_finite() {
                return Err(Error::Divergence(format!("non-finite activation after layer {i} ({:?})", layer.kind)));
            }
            for (t, (_, after)) in self.taps.iter().enumerate() {
                if *after == i {
                    taps[t] = y.clone();
                }
            }
            caches.push(cache);
            cur = y;
        }
        Ok((cur, Trace { caches, taps }))
    }

    /// Forward pass that keeps its activations for [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, trace) = self.forward_traced(x)?;
        self.last = Some(trace);
        Ok(y)
    }

    /// Output without touching cached state.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        x.expect_shape(&self.input_shape)
            .map_err(|e| Error::Config(format!("network input: {e}")))?;
        for layer in &self.layers {
            cur = super::layers::apply_layer(layer, &cur)?;
        }
        Ok(cur)
    }

    /// Tap activations of the last [`Network::forward`].
    pub fn last_trace(&self) -> Option<&Trace> {
        self.last.as_ref()
    }

    /// Backpropagates `g` through the last forward pass, accumulating
    /// parameter gradients; returns the input gradient.
    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        self.backward_with_taps(g, &[])
    }

    pub fn backward_with_taps(&mut self, g: &Tensor, tap_grads: &[(usize, &Tensor)]) -> Result<Tensor> {
        let trace = self
            .last
            .take()
            .ok_or_else(|| Error::State("backward called without a preceding forward pass".into()))?;
        self.backward_traced(&trace, g, tap_grads)
    }

    pub fn backward_traced(&mut self, trace: &Trace, g: &Tensor, tap_grads: &[(usize, &Tensor)]) -> Result<Tensor> {
        g.expect_shape(self.output_shape())?;
        if trace.caches.len() != self.layers.len() {
            return Err(Error::State("trace does not belong to this network".into()));
        }
        let mut cur = g.clone();
        for i in (0..self.layers.len()).rev() {
            for &(t, tg) in tap_grads {
                if self.taps[t].1 == i {
                    cur.add_assign(tg)?;
                }
            }
            cur = self.layers[i].backward(&trace.caches[i], &cur)?;
        }
        Ok(cur)
    }
}
