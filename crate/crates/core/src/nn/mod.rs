//! Minimal differentiable substrate: dense layers with optional low-rank
//! adapters, SiLU, sinusoidal time features and Adam.

mod adam;
mod linear;
mod mlp;
mod param;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use linear::{linear_forward, Linear, LowRank};
pub use mlp::Mlp;
pub use param::ParamTensor;

use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise `x * sigmoid(x)`.
pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu_scalar(v)).collect()
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Largest angular frequency used by [`time_embedding`]; the smallest is
/// `TIME_MAX_FREQ / TIME_FREQ_SPAN`.
pub const TIME_MAX_FREQ: f64 = 1000.0;
pub const TIME_FREQ_SPAN: f64 = 10_000.0;

/// Sinusoidal features of `t / total`: entry `2i` is `sin(w_i s)` and entry
/// `2i + 1` is `cos(w_i s)` with `w_i = TIME_MAX_FREQ * TIME_FREQ_SPAN^(-i / (dim / 2))`.
pub fn time_embedding(t: usize, total: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    if total == 0 || t > total {
        return Err(Error::Range(format!("timestep {t} outside [0, {total}]")));
    }
    let s = t as f64 / total as f64;
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let w = TIME_MAX_FREQ * TIME_FREQ_SPAN.powf(-(i as f64) / half as f64);
        out.push((w * s).sin());
        out.push((w * s).cos());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_values() {
        assert_eq!(silu(&[0.0]), vec![0.0]);
        assert!((silu_scalar(20.0) - 20.0).abs() < 1e-6);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu_scalar(1.0) - expected).abs() < 1e-15);
        assert!((silu_scalar(1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn silu_grad_matches_central_difference() {
        for &x in &[-6.0, -1.3, -0.2, 0.0, 0.4, 2.5, 9.0] {
            let h = 1e-5;
            let fd = (silu_scalar(x + h) - silu_scalar(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn time_embedding_at_zero() {
        let e = time_embedding(0, 200, 32).unwrap();
        for i in 0..16 {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn time_embedding_deterministic() {
        assert_eq!(
            time_embedding(37, 200, 32).unwrap(),
            time_embedding(37, 200, 32).unwrap()
        );
    }

    #[test]
    fn time_embedding_dim4_half_way() {
        // s = 0.5; frequencies 1000 and 1000 * 10000^(-1/2) = 10.
        let e = time_embedding(100, 200, 4).unwrap();
        let table = [500f64.sin(), 500f64.cos(), 5f64.sin(), 5f64.cos()];
        for (a, b) in e.iter().zip(table) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn time_embedding_rejects_odd_dim() {
        assert!(matches!(time_embedding(1, 10, 5), Err(Error::Config(_))));
    }
}
