use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::ParamTensor;
use crate::error::{Error, Result};

/// `W x + b` for a single vector.
pub fn linear_forward(x: &[f64], weight: &ParamTensor, bias: &ParamTensor) -> Result<Vec<f64>> {
    let (out, inp) = match weight.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::Dimension(format!("weight must be 2-D, got {s:?}"))),
    };
    if x.len() != inp {
        return Err(Error::Dimension(format!(
            "input has {} entries, weight expects {inp}",
            x.len()
        )));
    }
    if bias.len() != out {
        return Err(Error::Dimension(format!(
            "bias has {} entries, weight produces {out}",
            bias.len()
        )));
    }
    let w = weight.values();
    Ok((0..out)
        .map(|o| {
            let row = &w[o * inp..(o + 1) * inp];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias.values()[o]
        })
        .collect())
}

/// Low-rank adapter `scale * up * down` added to a frozen dense layer.
/// `up` starts at zero so the adapted layer initially equals the base layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub down: ParamTensor,
    pub up: ParamTensor,
    pub scale: f64,
}

impl LowRank {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rank: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            down: ParamTensor::kaiming_uniform(&[rank, in_dim], in_dim, rng),
            up: ParamTensor::zeros(&[out_dim, rank]),
            scale,
        }
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }
}

#[derive(Debug, Clone)]
struct LinearCache {
    input: Array2<f64>,
    hidden: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    pub lora: Option<LowRank>,
    cache: Option<LinearCache>,
}

impl PartialEq for Linear {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight && self.bias == other.bias && self.lora == other.lora
    }
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: ParamTensor::kaiming_uniform(&[out_dim, in_dim], in_dim, rng),
            bias: ParamTensor::kaiming_uniform(&[out_dim], in_dim, rng),
            lora: None,
            cache: None,
        }
    }

    pub fn from_params(weight: ParamTensor, bias: ParamTensor, lora: Option<LowRank>) -> Result<Self> {
        let (out, inp) = match weight.shape() {
            [o, i] => (*o, *i),
            s => return Err(Error::Dimension(format!("weight must be 2-D, got {s:?}"))),
        };
        if bias.shape() != [out] {
            return Err(Error::Dimension(format!("bias shape {:?} vs out {out}", bias.shape())));
        }
        if let Some(l) = &lora {
            let r = l.rank();
            if l.down.shape() != [r, inp] || l.up.shape() != [out, r] {
                return Err(Error::Dimension("low-rank factor shapes do not chain".into()));
            }
        }
        Ok(Self {
            weight,
            bias,
            lora,
            cache: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Batched forward; rows of `x` are examples.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_inner(x).0
    }

    fn forward_inner(&self, x: ArrayView2<f64>) -> (Array2<f64>, Option<Array2<f64>>) {
        let mut y = x.dot(&self.weight.matrix().t());
        let b = Array1::from(self.bias.values().to_vec());
        y += &b;
        let hidden = self.lora.as_ref().map(|l| {
            let h = x.dot(&l.down.matrix().t());
            let delta = h.dot(&l.up.matrix().t());
            y.scaled_add(l.scale, &delta);
            h
        });
        (y, hidden)
    }

    pub fn forward_train(&mut self, x: ArrayView2<f64>) -> Array2<f64> {
        let (y, hidden) = self.forward_inner(x);
        self.cache = Some(LinearCache {
            input: x.to_owned(),
            hidden,
        });
        y
    }

    /// Accumulates parameter gradients and returns the gradient with
    /// respect to the layer input.
    pub fn backward(&mut self, grad_out: ArrayView2<f64>) -> Result<Array2<f64>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        if grad_out.dim() != (cache.input.nrows(), self.out_dim()) {
            return Err(Error::Dimension(format!(
                "upstream gradient {:?} vs expected ({}, {})",
                grad_out.dim(),
                cache.input.nrows(),
                self.out_dim()
            )));
        }
        let dw = grad_out.t().dot(&cache.input);
        self.weight.grad_matrix_mut().zip_mut_with(&dw, |g, d| *g += d);
        let db = grad_out.sum_axis(Axis(0));
        for (g, d) in self.bias.grad_mut().iter_mut().zip(db.iter()) {
            *g += d;
        }
        let mut dx = grad_out.dot(&self.weight.matrix());
        if let Some(l) = self.lora.as_mut() {
            let h = cache
                .hidden
                .as_ref()
                .expect("hidden cached whenever an adapter is present");
            let mut dup = grad_out.t().dot(h);
            dup *= l.scale;
            l.up.grad_matrix_mut().zip_mut_with(&dup, |g, d| *g += d);
            let mut dh = grad_out.dot(&l.up.matrix());
            dh *= l.scale;
            let ddown = dh.t().dot(&cache.input);
            l.down.grad_matrix_mut().zip_mut_with(&ddown, |g, d| *g += d);
            dx += &dh.dot(&l.down.matrix());
        }
        Ok(dx)
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
