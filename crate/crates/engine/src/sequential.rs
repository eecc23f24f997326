use rand::Rng;

use crate::checkpoint::NamedTensor;
use crate::layers::{Buffer, Layer, LayerSpec, Mode, Param};
use crate::tensor::{Dims, Scalar, Tensor};
use crate::{EngineError, Result};

/// An ordered stack of named layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T> {
    layers: Vec<(String, Layer<T>)>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn from_specs<S: AsRef<str>>(specs: &[(S, LayerSpec)], rng: &mut impl Rng) -> Self {
        let layers = specs
            .iter()
            .map(|(name, spec)| (name.as_ref().to_owned(), spec.build(name.as_ref(), rng)))
            .collect();
        Self { layers }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer<T>) {
        self.layers.push((name.into(), layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Layer<T>)> {
        self.layers.iter().map(|(n, l)| (n.as_str(), l))
    }

    pub fn specs(&self) -> Vec<(String, LayerSpec)> {
        self.layers.iter().map(|(n, l)| (n.clone(), l.spec())).collect()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for (_, layer) in &mut self.layers {
            cur = layer.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    /// Forward pass that also reports the output dims of every layer.
    pub fn forward_trace(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<(String, Dims)>)> {
        let mut cur = x.clone();
        let mut trace = Vec::with_capacity(self.layers.len());
        for (name, layer) in &mut self.layers {
            cur = layer.forward(&cur, mode)?;
            trace.push((name.clone(), cur.dims()));
        }
        Ok((cur, trace))
    }

    /// Symbolic shape pass mirroring [`Sequential::forward_trace`].
    pub fn shape_trace(&self, input: Dims) -> Result<Vec<(String, Dims)>> {
        let mut cur = input;
        let mut trace = Vec::with_capacity(self.layers.len());
        for (name, layer) in &self.layers {
            cur = layer.spec().output_dims(cur)?;
            trace.push((name.clone(), cur));
        }
        Ok(trace)
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        Ok(self.shape_trace(input)?.last().map(|(_, d)| *d).unwrap_or(input))
    }

    /// Propagates `dy` back through every layer, accumulating parameter
    /// gradients, and returns the gradient with respect to the input.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = dy.clone();
        for (_, layer) in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|(_, l)| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|(_, l)| l.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        self.layers.iter().flat_map(|(_, l)| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.layers.iter_mut().flat_map(|(_, l)| l.buffers_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for (_, l) in &mut self.layers {
            l.set_frozen(frozen);
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Parameters followed by buffers, as checkpoint tensors.
    pub fn export_state(&self) -> Vec<NamedTensor> {
        let params = self.params().into_iter().map(|p| NamedTensor::from_tensor(&p.name, &p.value));
        let buffers = self.buffers().into_iter().map(|b| NamedTensor::from_tensor(&b.name, &b.value));
        params.chain(buffers).collect()
    }

    /// Loads every parameter and buffer by name; extra tensors are ignored.
    pub fn import_state(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| EngineError::Format(format!("checkpoint lacks tensor `{name}`")))
        };
        for p in self.params_mut() {
            p.value = find(&p.name)?.to_tensor(p.value.dims())?;
        }
        for b in self.buffers_mut() {
            b.value = find(&b.name)?.to_tensor(b.value.dims())?;
        }
        Ok(())
    }
}
