use super::{Layer, Mode, Param};
use crate::error::{Result, ResultExt};
use crate::tensor::Tensor;

/// Ordered chain of named layers.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }

    pub fn with(mut self, name: impl Into<String>, layer: impl Layer + 'static) -> Self {
        self.push(name, layer);
        self
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &dyn Layer)> {
        self.layers.iter().map(|(n, l)| (n.as_str(), l.as_ref()))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Box<dyn Layer>)> {
        self.layers.iter_mut().map(|(n, l)| (n.as_str(), l))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn kind(&self) -> &'static str {
        "sequential"
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for (name, layer) in &mut self.layers {
            h = layer
                .forward(&h, mode)
                .with_context(|| format!("forward of layer '{name}' ({})", layer.kind()))?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for (name, layer) in self.layers.iter_mut().rev() {
            g = layer
                .backward(&g)
                .with_context(|| format!("backward of layer '{name}' ({})", layer.kind()))?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .flat_map(|(n, l)| l.params().into_iter().map(move |(p, v)| (format!("{n}.{p}"), v)))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .flat_map(|(n, l)| {
                let n = n.clone();
                l.params_mut().into_iter().map(move |(p, v)| (format!("{n}.{p}"), v))
            })
            .collect()
    }

    fn buffers(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|(n, l)| l.buffers().into_iter().map(move |(p, v)| (format!("{n}.{p}"), v)))
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .flat_map(|(n, l)| {
                let n = n.clone();
                l.buffers_mut().into_iter().map(move |(p, v)| (format!("{n}.{p}"), v))
            })
            .collect()
    }

    fn freeze_randomness(&mut self, frozen: bool) {
        for (_, l) in &mut self.layers {
            l.freeze_randomness(frozen);
        }
    }
}
