//! The blended-target loss equals a scaled anchored loss plus a constant.
//!
//! ```text
//! cargo run --release --example loss_identity
//! ```

use anchorlab::objectives::{
    anchored_minimizer, check_blend_anchor_identity, grad_wrt_pred, loss_anchored, GradTarget,
};
use anchorlab::rng::{normal_vec, seeded};

fn main() -> anchorlab::Result<()> {
    let mut rng = seeded(42);
    let d = 8;
    let (pred, rare, freq) = (
        normal_vec(&mut rng, d),
        normal_vec(&mut rng, d),
        normal_vec(&mut rng, d),
    );

    println!(
        "{:>6} {:>6} {:>14} {:>14} {:>10}",
        "lambda", "w", "blended", "scaled anchor", "rel gap"
    );
    for lambda in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let check = check_blend_anchor_identity(&pred, &rare, &freq, lambda)?;
        let w = (1.0 - lambda) / lambda;
        println!(
            "{lambda:>6} {w:>6.3} {:>14.9} {:>14.9} {:>10.2e}",
            check.lhs,
            check.rhs,
            check.relative_gap()
        );
    }

    // Gradients agree up to the factor lambda, so both losses share a minimiser.
    let lambda = 0.5;
    let w = (1.0 - lambda) / lambda;
    let gb = grad_wrt_pred(
        &pred,
        GradTarget::Blended {
            eps_rare: &rare,
            eps_freq: &freq,
            lambda,
        },
    )?;
    let ga = grad_wrt_pred(
        &pred,
        GradTarget::Anchored {
            eps: &rare,
            eps_anchor: &freq,
            w,
        },
    )?;
    let worst = gb
        .iter()
        .zip(&ga)
        .map(|(b, a)| (b - lambda * a).abs())
        .fold(0.0, f64::max);
    println!("\nmax |grad blended - lambda * grad anchored| = {worst:.2e}");

    let star = anchored_minimizer(&rare, &freq, w);
    let at_star = loss_anchored(&star, &rare, &freq, w)?.total;
    let at_pred = loss_anchored(&pred, &rare, &freq, w)?.total;
    println!("anchored loss at minimiser {at_star:.6}, at a random prediction {at_pred:.6}");
    Ok(())
}
