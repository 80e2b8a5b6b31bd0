use crate::condition::Condition;
use crate::error::{Error, Result};

/// `eps_uncond + g * (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], g: f64) -> Vec<f64> {
    eps_cond.iter().zip(eps_uncond).map(|(c, u)| u + g * (c - u)).collect()
}

/// Convex blend of a rare-concept and a frequent-concept noise estimate,
/// `lambda * eps_rare + (1 - lambda) * eps_freq`.
///
/// Written in the same `b + lambda * (a - b)` form as [`cfg_combine`] so the
/// two combinators agree bit for bit when `g = lambda`.
pub fn blend_guidance(eps_rare: &[f64], eps_freq: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("blend coefficient {lambda} outside [0, 1]")));
    }
    if eps_rare.len() != eps_freq.len() {
        return Err(Error::Dimension("blend operands differ in length".into()));
    }
    Ok(cfg_combine(eps_rare, eps_freq, lambda))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceMode {
    /// Primary condition only.
    None,
    /// Classifier-free guidance against the null concept in the same context.
    Cfg(f64),
    /// `lambda * eps(primary) + (1 - lambda) * eps(anchor)` at every step.
    Blend(f64),
    /// Anchor condition for the first `ceil(frac * steps)` steps, primary after.
    Switch(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    pub primary: Condition,
    pub anchor: Condition,
}

impl GuidanceSpec {
    pub fn plain(primary: Condition) -> Self {
        Self {
            mode: GuidanceMode::None,
            primary,
            anchor: primary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            GuidanceMode::None => Ok(()),
            GuidanceMode::Cfg(g) if g >= 0.0 && g.is_finite() => Ok(()),
            GuidanceMode::Blend(l) if (0.0..=1.0).contains(&l) => Ok(()),
            GuidanceMode::Switch(f) if f > 0.0 && f < 1.0 => Ok(()),
            m => Err(Error::Config(format!("invalid guidance parameters {m:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cfg_limits() {
        let c = [1.0, -2.0, 0.5];
        let u = [0.25, 3.0, -1.0];
        assert_eq!(cfg_combine(&c, &u, 1.0), c.to_vec());
        assert_eq!(cfg_combine(&c, &u, 0.0), u.to_vec());
        assert_eq!(cfg_combine(&c, &c, 7.5), c.to_vec());
    }

    #[test]
    fn blend_limits() {
        let r = [1.0, -2.0];
        let f = [3.0, 4.0];
        assert_eq!(blend_guidance(&r, &f, 1.0).unwrap(), r.to_vec());
        assert_eq!(blend_guidance(&r, &f, 0.0).unwrap(), f.to_vec());
        assert_eq!(blend_guidance(&r, &f, 0.5).unwrap(), vec![2.0, 1.0]);
        assert!(matches!(blend_guidance(&r, &f, 1.5), Err(Error::Config(_))));
        assert!(matches!(blend_guidance(&r, &f, -0.1), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn blend_equals_cfg_with_matching_scale(
            a in prop::collection::vec(-5.0f64..5.0, 1..16),
            lambda in 0.0f64..=1.0,
            shift in -3.0f64..3.0,
        ) {
            let b: Vec<f64> = a.iter().map(|v| v * 0.5 + shift).collect();
            prop_assert_eq!(blend_guidance(&a, &b, lambda).unwrap(), cfg_combine(&a, &b, lambda));
        }
    }
}
