use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::{silu_grad, silu_scalar, Linear, LowRank, ParamTensor};
use crate::error::{Error, Result};

/// Dense network with SiLU between hidden layers and identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    // Pre-activations of each hidden layer from the last training forward.
    pre_activations: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], output_dim: usize, rng: &mut R) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self {
            layers,
            pre_activations: Vec::new(),
        }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension(format!(
                    "layer output {} does not feed input {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            pre_activations: Vec::new(),
        })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Linear::out_dim).unwrap_or(0)
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Linear::out_dim)
            .collect()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..=last] {
            h.mapv_inplace(silu_scalar);
            h = layer.forward(h.view());
        }
        h
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward_train(&mut self, x: ArrayView2<f64>) -> Array2<f64> {
        self.pre_activations.clear();
        let n = self.layers.len();
        let mut h = self.layers[0].forward_train(x);
        for i in 1..n {
            let act = h.mapv(silu_scalar);
            self.pre_activations.push(h);
            h = self.layers[i].forward_train(act.view());
        }
        h
    }

    /// Chain rule through every layer; accumulates into parameter grads and
    /// returns the gradient with respect to the network input.
    pub fn backward(&mut self, grad_out: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.layers.iter().any(|l| !l.has_cache()) {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        let n = self.layers.len();
        let mut g = self.layers[n - 1].backward(grad_out)?;
        for i in (0..n - 1).rev() {
            let pre = &self.pre_activations[i];
            g.zip_mut_with(pre, |gi, &p| *gi *= silu_grad(p));
            g = self.layers[i].backward(g.view())?;
        }
        self.pre_activations.clear();
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        self.pre_activations.clear();
        self.layers.iter_mut().for_each(Linear::clear_cache);
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Attach a fresh zero-initialised adapter to every layer.
    pub fn attach_low_rank<R: Rng + ?Sized>(&mut self, rank: usize, scale: f64, rng: &mut R) {
        for layer in &mut self.layers {
            layer.lora = Some(LowRank::new(layer.in_dim(), layer.out_dim(), rank, scale, rng));
        }
    }

    pub fn base_params(&self) -> Vec<&ParamTensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn base_params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn low_rank_params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.lora.as_mut())
            .flat_map(|l| [&mut l.down, &mut l.up])
            .collect()
    }

    pub fn low_rank_params(&self) -> Vec<&ParamTensor> {
        self.layers
            .iter()
            .filter_map(|l| l.lora.as_ref())
            .flat_map(|l| [&l.down, &l.up])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(lr) = l.lora.as_mut() {
                out.push(&mut lr.down);
                out.push(&mut lr.up);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(lr) = l.lora.as_ref() {
                out.push(&lr.down);
                out.push(&lr.up);
            }
        }
        out
    }
}
