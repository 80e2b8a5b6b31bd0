//! Central finite differences against backprop for an adapted MLP.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use anchorlab::nn::Mlp;
use anchorlab::rng::{normal, seeded};
use ndarray::Array2;

fn main() -> anchorlab::Result<()> {
    let mut rng = seeded(3);
    let mut mlp = Mlp::new(4, &[16, 16], 2, &mut rng);
    mlp.attach_low_rank(2, 1.0, &mut rng);
    // Adapters start as a no-op; give them weight so their gradients matter.
    for layer in mlp.layers_mut() {
        let up = &mut layer.lora.as_mut().expect("attached").up;
        up.values_mut().iter_mut().for_each(|v| *v = 0.2 * normal(&mut rng));
    }
    let x = Array2::from_shape_fn((5, 4), |_| normal(&mut rng));
    let c = Array2::from_shape_fn((5, 2), |_| normal(&mut rng));
    let loss = |m: &Mlp| (m.forward(x.view()) * &c).sum();

    mlp.zero_grad();
    mlp.forward_train(x.view());
    mlp.backward(c.view())?;
    mlp.clear_cache();
    let analytic: Vec<Vec<f64>> = mlp.params().iter().map(|p| p.grad().to_vec()).collect();

    let h = 1e-4;
    let mut probe = mlp.clone();
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for (j, &a) in grad.iter().enumerate() {
            let orig = probe.params()[i].values()[j];
            probe.params_mut()[i].values_mut()[j] = orig + h;
            let up = loss(&probe);
            probe.params_mut()[i].values_mut()[j] = orig - h;
            let down = loss(&probe);
            probe.params_mut()[i].values_mut()[j] = orig;
            let num = (up - down) / (2.0 * h);
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
        println!(
            "tensor {i:>2} shape {:?}: max relative error {worst:.2e}",
            mlp.params()[i].shape()
        );
    }
    Ok(())
}
