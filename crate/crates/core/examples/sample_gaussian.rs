//! Fit an unconditional model to one 2-D Gaussian and compare sample moments
//! from the stochastic and deterministic samplers.
//!
//! ```text
//! cargo run --release --example sample_gaussian [pretrain_steps]
//! ```

use anchorlab::concepts::{Gaussian, Mixture, World};
use anchorlab::diffusion::{sample, GuidanceSpec, Sampler, Schedule, ScheduleKind};
use anchorlab::personalize::{pretrain, PretrainConfig};
use anchorlab::{Condition, Context};
use ndarray::{Array2, Axis};

fn moments(xs: &Array2<f64>) -> ([f64; 2], [f64; 3]) {
    let m = xs.mean_axis(Axis(0)).expect("non-empty");
    let n = xs.nrows() as f64 - 1.0;
    let c = |a: usize, b: usize| {
        xs.rows()
            .into_iter()
            .map(|r| (r[a] - m[a]) * (r[b] - m[b]))
            .sum::<f64>()
            / n
    };
    ([m[0], m[1]], [c(0, 0), c(0, 1), c(1, 1)])
}

fn main() -> anchorlab::Result<()> {
    let steps = std::env::args().nth(1).map_or(8000, |s| s.parse().expect("steps"));
    let target = Gaussian::new(vec![0.4, -0.3], vec![0.09, 0.03, 0.03, 0.05])?;
    let world = World::from_parts(5, vec![Mixture::new(vec![1.0], vec![target])?], vec![], None)?;
    let sched = Schedule::new(200, ScheduleKind::Cosine)?;
    let cfg = PretrainConfig {
        steps,
        null_prob: 1.0,
        ..PretrainConfig::default()
    };
    let pre = pretrain(&world, &sched, &cfg)?;
    println!(
        "pretrained {steps} steps, final loss {:.4}",
        pre.losses.last().copied().unwrap_or(f64::NAN)
    );

    let guidance = GuidanceSpec::plain(Condition::null(Context::Plain));
    println!("target      mean [0.400, -0.300] cov [0.0900, 0.0300, 0.0500]");
    for (name, sampler) in [("ddpm", Sampler::Ddpm), ("ddim-50", Sampler::Ddim(50))] {
        let xs = sample(&pre.model, &guidance, 4096, sampler, &sched, 1)?;
        let (m, c) = moments(&xs);
        println!(
            "{name:<11} mean [{:.3}, {:.3}] cov [{:.4}, {:.4}, {:.4}]",
            m[0], m[1], c[0], c[1], c[2]
        );
    }
    Ok(())
}
