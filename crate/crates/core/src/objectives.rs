//! Training losses and the algebraic link between the blended-target loss and
//! the anchored loss.
//!
//! For `lambda` in (0, 1) and `w = (1 - lambda) / lambda`:
//!
//! ```text
//! |lambda*r + (1-lambda)*f - p|^2
//!     = lambda * (|r - p|^2 + w |p - f|^2) - lambda (1 - lambda) |r - f|^2
//! ```
//!
//! The last term does not depend on the prediction `p`, so both losses share
//! minimisers and their gradients differ only by the factor `lambda`.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::blend_guidance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Subject reconstruction only.
    Recon,
    /// Reconstruction plus prior preservation on pretrained class samples.
    ReconPpl,
    /// Reconstruction anchored to the frozen pretrained class prediction.
    Anchored,
    /// Anchored, but the anchor is the current model's class prediction.
    AnchoredFt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Recon, Method::ReconPpl, Method::Anchored, Method::AnchoredFt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Recon => "recon",
            Method::ReconPpl => "recon_ppl",
            Method::Anchored => "anchored",
            Method::AnchoredFt => "anchored_ft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (recon|recon_ppl|anchored|anchored_ft)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub method: Method,
    /// Anchor weight; `w = (1 - lambda) / lambda`.
    pub w: f64,
    /// Weight of the prior-preservation term (only used by `ReconPpl`).
    pub ppl_weight: f64,
}

impl ObjectiveConfig {
    pub fn new(method: Method, w: f64) -> Result<Self> {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Config(format!("anchor weight must be finite and >= 0, got {w}")));
        }
        Ok(Self {
            method,
            w,
            ppl_weight: 1.0,
        })
    }

    pub fn recon() -> Self {
        Self::new(Method::Recon, 0.0).unwrap()
    }

    pub fn anchored(w: f64) -> Result<Self> {
        Self::new(Method::Anchored, w)
    }

    pub fn from_lambda(method: Method, lambda: f64) -> Result<Self> {
        Self::new(method, weight_from_lambda(lambda)?)
    }

    /// Accept `w`, `lambda`, or both (which must agree to 1e-12).
    pub fn resolve(method: Method, w: Option<f64>, lambda: Option<f64>) -> Result<Self> {
        match (w, lambda) {
            (Some(w), Some(l)) => {
                let from_l = weight_from_lambda(l)?;
                if (w - from_l).abs() >= 1e-12 {
                    return Err(Error::Config(format!(
                        "w = {w} disagrees with lambda = {l} (needs {from_l})"
                    )));
                }
                Self::new(method, w)
            }
            (Some(w), None) => Self::new(method, w),
            (None, Some(l)) => Self::from_lambda(method, l),
            (None, None) => Self::new(method, 1.0),
        }
    }

    /// Blend coefficient implied by `w`.
    pub fn lambda(&self) -> f64 {
        1.0 / (1.0 + self.w)
    }
}

pub fn weight_from_lambda(lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Config(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    Ok((1.0 - lambda) / lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_term: f64,
    pub anchor_term: f64,
    pub ppl_term: f64,
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )))
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `|eps - eps_pred|^2`.
pub fn loss_recon(eps_pred: &[f64], eps: &[f64]) -> Result<f64> {
    check_len(eps_pred, eps)?;
    Ok(squared_distance(eps, eps_pred))
}

/// Prior-preservation term; same functional form as [`loss_recon`] but fed
/// with predictions on pretrained class samples.
pub fn loss_ppl(eps_pred_on_prior: &[f64], eps: &[f64]) -> Result<f64> {
    loss_recon(eps_pred_on_prior, eps)
}

/// `|blend(eps_rare, eps_freq, lambda) - eps_pred|^2`.
pub fn loss_blended(eps_pred: &[f64], eps_rare: &[f64], eps_freq: &[f64], lambda: f64) -> Result<f64> {
    check_len(eps_pred, eps_rare)?;
    let target = blend_guidance(eps_rare, eps_freq, lambda)?;
    Ok(squared_distance(&target, eps_pred))
}

/// `|eps - eps_pred|^2 + w |eps_pred - eps_anchor|^2`; `eps_anchor` is a constant.
pub fn loss_anchored(eps_pred: &[f64], eps: &[f64], eps_anchor: &[f64], w: f64) -> Result<LossBreakdown> {
    check_len(eps_pred, eps)?;
    check_len(eps_pred, eps_anchor)?;
    if !(w >= 0.0) {
        return Err(Error::Config(format!("anchor weight must be >= 0, got {w}")));
    }
    let recon_term = squared_distance(eps, eps_pred);
    let anchor_term = squared_distance(eps_pred, eps_anchor);
    Ok(LossBreakdown {
        total: recon_term + w * anchor_term,
        recon_term,
        anchor_term,
        ppl_term: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

impl IdentityCheck {
    pub fn relative_gap(&self) -> f64 {
        self.gap / self.lhs.abs().max(self.rhs.abs()).max(f64::MIN_POSITIVE)
    }
}

/// Evaluate both sides of the blended/anchored identity.
pub fn check_blend_anchor_identity(
    eps_pred: &[f64],
    eps_rare: &[f64],
    eps_freq: &[f64],
    lambda: f64,
) -> Result<IdentityCheck> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Config(format!("identity needs lambda in (0, 1), got {lambda}")));
    }
    check_len(eps_rare, eps_freq)?;
    let lhs = loss_blended(eps_pred, eps_rare, eps_freq, lambda)?;
    let w = (1.0 - lambda) / lambda;
    let anchored = loss_anchored(eps_pred, eps_rare, eps_freq, w)?;
    let rhs = lambda * anchored.total - lambda * (1.0 - lambda) * squared_distance(eps_rare, eps_freq);
    Ok(IdentityCheck {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

/// Which loss [`grad_wrt_pred`] differentiates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradTarget<'a> {
    Blended {
        eps_rare: &'a [f64],
        eps_freq: &'a [f64],
        lambda: f64,
    },
    Anchored {
        eps: &'a [f64],
        eps_anchor: &'a [f64],
        w: f64,
    },
}

/// Analytic gradient of the chosen loss with respect to `eps_pred`.
pub fn grad_wrt_pred(eps_pred: &[f64], target: GradTarget<'_>) -> Result<Vec<f64>> {
    match target {
        GradTarget::Blended {
            eps_rare,
            eps_freq,
            lambda,
        } => {
            check_len(eps_pred, eps_rare)?;
            let star = blend_guidance(eps_rare, eps_freq, lambda)?;
            Ok(eps_pred.iter().zip(&star).map(|(p, s)| 2.0 * (p - s)).collect())
        }
        GradTarget::Anchored { eps, eps_anchor, w } => {
            check_len(eps_pred, eps)?;
            check_len(eps_pred, eps_anchor)?;
            if !(w >= 0.0) {
                return Err(Error::Config(format!("anchor weight must be >= 0, got {w}")));
            }
            Ok(eps_pred
                .iter()
                .zip(eps)
                .zip(eps_anchor)
                .map(|((p, e), a)| 2.0 * (p - e) + w * 2.0 * (p - a))
                .collect())
        }
    }
}

/// Closed-form minimiser of the anchored loss, `(eps + w eps_anchor) / (1 + w)`.
pub fn anchored_minimizer(eps: &[f64], eps_anchor: &[f64], w: f64) -> Vec<f64> {
    eps.iter()
        .zip(eps_anchor)
        .map(|(e, a)| (e + w * a) / (1.0 + w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};
    use proptest::prelude::*;

    fn scalar_loop(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            let d = a[i] - b[i];
            s += d * d;
        }
        s
    }

    #[test]
    fn recon_examples() {
        assert_eq!(loss_recon(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(loss_recon(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 25.0);
        let mut rng = seeded(1);
        let a = normal_vec(&mut rng, 9);
        let b = normal_vec(&mut rng, 9);
        assert!((loss_recon(&a, &b).unwrap() - scalar_loop(&a, &b)).abs() < 1e-12);
        assert!(matches!(loss_recon(&a, &b[..3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn ppl_shares_recon_form() {
        let mut rng = seeded(2);
        let a = normal_vec(&mut rng, 5);
        let b = normal_vec(&mut rng, 5);
        assert_eq!(loss_ppl(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_ppl(&a, &b).unwrap(), loss_recon(&a, &b).unwrap());
        assert!((loss_ppl(&a, &b).unwrap() - scalar_loop(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn blended_limits() {
        let mut rng = seeded(3);
        let p = normal_vec(&mut rng, 4);
        let r = normal_vec(&mut rng, 4);
        let f = normal_vec(&mut rng, 4);
        assert!((loss_blended(&p, &r, &f, 1.0).unwrap() - loss_recon(&p, &r).unwrap()).abs() < 1e-12);
        assert_eq!(loss_blended(&p, &r, &f, 0.0).unwrap(), loss_recon(&p, &f).unwrap());
        for l in [0.0, 0.3, 0.9] {
            assert!((loss_blended(&p, &r, &r, l).unwrap() - loss_recon(&p, &r).unwrap()).abs() < 1e-12);
        }
        assert!(matches!(loss_blended(&p, &r, &f, 1.2), Err(Error::Config(_))));
    }

    #[test]
    fn anchored_examples() {
        let mut rng = seeded(4);
        let p = normal_vec(&mut rng, 6);
        let e = normal_vec(&mut rng, 6);
        let a = normal_vec(&mut rng, 6);
        let b = loss_anchored(&p, &e, &a, 0.0).unwrap();
        assert_eq!(b.total, loss_recon(&p, &e).unwrap());
        assert_eq!(loss_anchored(&e, &e, &e, 3.0).unwrap().total, 0.0);
        // lambda = 0.5 -> w = 1
        let w = weight_from_lambda(0.5).unwrap();
        assert_eq!(w, 1.0);
        let b = loss_anchored(&p, &e, &a, w).unwrap();
        assert!((b.total - (scalar_loop(&e, &p) + scalar_loop(&p, &a))).abs() < 1e-12);
        assert!((b.total - (b.recon_term + w * b.anchor_term + b.ppl_term)).abs() < 1e-12);
    }

    #[test]
    fn identity_degenerate_and_hand_expansion() {
        let mut rng = seeded(5);
        let p = normal_vec(&mut rng, 7);
        let r = normal_vec(&mut rng, 7);
        let c = check_blend_anchor_identity(&p, &r, &r, 0.3).unwrap();
        assert!(c.gap < 1e-12);
        // lambda = 0.5 and pred = rare: blended = |0.5 (r - f)|^2 = 0.25 |delta|^2
        let f = normal_vec(&mut rng, 7);
        let c = check_blend_anchor_identity(&r, &r, &f, 0.5).unwrap();
        let delta2 = scalar_loop(&r, &f);
        assert!((c.lhs - 0.25 * delta2).abs() < 1e-12 * delta2);
        // rhs by hand: 0.5 * (0 + 1 * delta2) - 0.25 delta2
        assert!((c.rhs - 0.25 * delta2).abs() < 1e-12 * delta2);
        assert!(matches!(
            check_blend_anchor_identity(&p, &r, &f, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            check_blend_anchor_identity(&p, &r, &f, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradient_forms() {
        let mut rng = seeded(6);
        let p = normal_vec(&mut rng, 5);
        let r = normal_vec(&mut rng, 5);
        let f = normal_vec(&mut rng, 5);
        let l = 0.4;
        let g = grad_wrt_pred(
            &p,
            GradTarget::Blended {
                eps_rare: &r,
                eps_freq: &f,
                lambda: l,
            },
        )
        .unwrap();
        let star = blend_guidance(&r, &f, l).unwrap();
        for i in 0..5 {
            assert!((g[i] - 2.0 * (p[i] - star[i])).abs() < 1e-14);
        }
        let g0 = grad_wrt_pred(
            &star,
            GradTarget::Blended {
                eps_rare: &r,
                eps_freq: &f,
                lambda: l,
            },
        )
        .unwrap();
        assert!(g0.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = seeded(7);
        let p = normal_vec(&mut rng, 4);
        let e = normal_vec(&mut rng, 4);
        let a = normal_vec(&mut rng, 4);
        let w = 0.75;
        let g = grad_wrt_pred(
            &p,
            GradTarget::Anchored {
                eps: &e,
                eps_anchor: &a,
                w,
            },
        )
        .unwrap();
        for i in 0..4 {
            let h = 1e-6;
            let mut hi = p.clone();
            hi[i] += h;
            let mut lo = p.clone();
            lo[i] -= h;
            let fd = (loss_anchored(&hi, &e, &a, w).unwrap().total - loss_anchored(&lo, &e, &a, w).unwrap().total)
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn shared_minimiser_by_gradient_descent() {
        let mut rng = seeded(8);
        let r = normal_vec(&mut rng, 3);
        let f = normal_vec(&mut rng, 3);
        let lambda = 0.5;
        let w = weight_from_lambda(lambda).unwrap();
        let star = blend_guidance(&r, &f, lambda).unwrap();
        let closed = anchored_minimizer(&r, &f, w);
        for i in 0..3 {
            assert!((star[i] - closed[i]).abs() < 1e-12);
        }
        for _ in 0..5 {
            let start = normal_vec(&mut rng, 3);
            let mut pb = start.clone();
            let mut pa = start;
            for _ in 0..2000 {
                let gb = grad_wrt_pred(
                    &pb,
                    GradTarget::Blended {
                        eps_rare: &r,
                        eps_freq: &f,
                        lambda,
                    },
                )
                .unwrap();
                let ga = grad_wrt_pred(
                    &pa,
                    GradTarget::Anchored {
                        eps: &r,
                        eps_anchor: &f,
                        w,
                    },
                )
                .unwrap();
                pb.iter_mut().zip(&gb).for_each(|(p, g)| *p -= 0.1 * g);
                pa.iter_mut().zip(&ga).for_each(|(p, g)| *p -= 0.05 * g);
            }
            assert!(squared_distance(&pa, &pb).sqrt() < 1e-6);
            assert!(squared_distance(&pa, &star).sqrt() < 1e-6);
        }
    }

    #[test]
    fn lambda_w_consistency() {
        let c = ObjectiveConfig::resolve(Method::Anchored, Some(1.0), Some(0.5)).unwrap();
        assert_eq!(c.w, 1.0);
        assert!(ObjectiveConfig::resolve(Method::Anchored, Some(0.9), Some(0.5)).is_err());
        assert!(ObjectiveConfig::new(Method::Anchored, -0.1).is_err());
        assert!((ObjectiveConfig::resolve(Method::Anchored, None, Some(0.8)).unwrap().w - 0.25).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn identity_holds(
            seed in 0u64..10_000,
            d in 2usize..40,
            lambda in 0.01f64..0.99,
        ) {
            let mut rng = seeded(seed);
            let p = normal_vec(&mut rng, d);
            let r = normal_vec(&mut rng, d);
            let f = normal_vec(&mut rng, d);
            let c = check_blend_anchor_identity(&p, &r, &f, lambda).unwrap();
            prop_assert!(c.relative_gap() < 1e-9);
            let gb = grad_wrt_pred(&p, GradTarget::Blended { eps_rare: &r, eps_freq: &f, lambda }).unwrap();
            let ga = grad_wrt_pred(&p, GradTarget::Anchored { eps: &r, eps_anchor: &f, w: (1.0 - lambda) / lambda }).unwrap();
            for i in 0..d {
                prop_assert!((gb[i] - lambda * ga[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn losses_non_negative(
            a in prop::collection::vec(-10.0f64..10.0, 3),
            b in prop::collection::vec(-10.0f64..10.0, 3),
            c in prop::collection::vec(-10.0f64..10.0, 3),
            w in 0.0f64..5.0,
        ) {
            prop_assert!(loss_recon(&a, &b).unwrap() >= 0.0);
            prop_assert!(loss_anchored(&a, &b, &c, w).unwrap().total >= 0.0);
            prop_assert!(loss_blended(&a, &b, &c, 0.3).unwrap() >= 0.0);
        }
    }
}
