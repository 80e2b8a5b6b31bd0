use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!(
                "unknown schedule kind `{other}` (linear|cosine)"
            ))),
        }
    }
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

/// Signal and noise coefficients for `t = 0..=T`, with `alpha[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    total: usize,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl Schedule {
    pub fn new(total: usize, kind: ScheduleKind) -> Result<Self> {
        if total < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {total}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                // The familiar 1e-4..0.02 range at T = 1000, rescaled so the
                // total noise injected does not depend on T.
                let scale = 1000.0 / total as f64;
                let (lo, hi) = (1e-4 * scale, 0.02 * scale);
                (1..=total)
                    .map(|t| {
                        let frac = (t - 1) as f64 / (total - 1) as f64;
                        (lo + frac * (hi - lo)).min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / total as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=total)
                    .map(|t| (1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(total + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        let alpha = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            kind,
            total,
            alpha_bar,
            alpha,
            sigma,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t > self.total {
            Err(Error::Range(format!("timestep {t} outside [0, {}]", self.total)))
        } else {
            Ok(())
        }
    }
}

/// `alpha_t * z0 + sigma_t * eps`.
pub fn forward_noise(z0: &[f64], t: usize, eps: &[f64], sched: &Schedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    if z0.len() != eps.len() {
        return Err(Error::Dimension(format!(
            "z0 has {} entries, eps {}",
            z0.len(),
            eps.len()
        )));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + s * e).collect())
}

/// Tweedie link between the noise prediction and the score: `-eps_hat / sigma_t`.
pub fn eps_to_score(eps_hat: &[f64], t: usize, sched: &Schedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    let s = sched.sigma(t);
    if s <= 0.0 {
        return Err(Error::Singularity(format!("sigma is zero at t = {t}")));
    }
    Ok(eps_hat.iter().map(|e| -e / s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};

    #[test]
    fn rejects_short_schedules() {
        assert!(matches!(Schedule::new(1, ScheduleKind::Cosine), Err(Error::Config(_))));
    }

    #[test]
    fn variance_preserving_and_boundaries() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for total in [2, 3, 10, 200, 1000] {
                let s = Schedule::new(total, kind).unwrap();
                for t in 0..=total {
                    let vp = s.alpha(t).powi(2) + s.sigma(t).powi(2);
                    assert!((vp - 1.0).abs() < 1e-12, "{kind} T={total} t={t}");
                    if t > 0 {
                        assert!(s.alpha(t) <= s.alpha(t - 1));
                    }
                }
                assert!(s.alpha(0) >= 0.999);
                assert!(s.sigma(total) >= 0.99, "{kind} T={total}: {}", s.sigma(total));
            }
        }
    }

    #[test]
    fn cosine_alpha_at_zero() {
        let s = Schedule::new(1000, ScheduleKind::Cosine).unwrap();
        assert!(s.alpha(0) >= 0.999);
        // First step of the cosine formula evaluated directly.
        let f = |t: f64| {
            (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2)
        };
        let ab1 = f(1.0) / f(0.0);
        assert!((s.alpha_bar(1) - ab1).abs() < 1e-15);
        assert!(s.alpha(1) >= 0.999);
    }

    #[test]
    fn linear_strictly_decreasing() {
        let s = Schedule::new(200, ScheduleKind::Linear).unwrap();
        let mut cum = 1.0;
        for t in 1..=200 {
            let beta = 1.0 - s.alpha_bar(t) / s.alpha_bar(t - 1);
            cum *= 1.0 - beta;
            assert!((cum - s.alpha_bar(t)).abs() < 1e-12);
            assert!(s.alpha(t) < s.alpha(t - 1));
        }
    }

    #[test]
    fn forward_noise_boundaries() {
        let s = Schedule::new(200, ScheduleKind::Cosine).unwrap();
        let z0 = [1.5, -0.5];
        let z = forward_noise(&z0, 0, &[0.3, -2.0], &s).unwrap();
        let norm0 = (z0[0] * z0[0] + z0[1] * z0[1]).sqrt();
        let diff = ((z[0] - z0[0]).powi(2) + (z[1] - z0[1]).powi(2)).sqrt();
        assert!(diff < 1e-2 * norm0);
        let t = 77;
        let z = forward_noise(&z0, t, &[0.0, 0.0], &s).unwrap();
        assert_eq!(z, vec![s.alpha(t) * z0[0], s.alpha(t) * z0[1]]);
        assert!(matches!(forward_noise(&z0, 201, &[0.0, 0.0], &s), Err(Error::Range(_))));
    }

    #[test]
    fn forward_noise_monte_carlo_moments() {
        let s = Schedule::new(200, ScheduleKind::Cosine).unwrap();
        let t = 100;
        let z0 = [0.8, -1.3];
        let n = 100_000;
        let mut rng = seeded(2024);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let e = normal_vec(&mut rng, 2);
            let z = forward_noise(&z0, t, &e, &s).unwrap();
            for k in 0..2 {
                sum[k] += z[k];
                sq[k] += z[k] * z[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let tol = 3.0 * s.sigma(t) / (n as f64).sqrt();
            assert!((mean - s.alpha(t) * z0[k]).abs() < tol);
            assert!((var / s.sigma(t).powi(2) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn score_conversion() {
        let s = Schedule::new(200, ScheduleKind::Cosine).unwrap();
        assert_eq!(eps_to_score(&[0.0, 0.0], 10, &s).unwrap(), vec![0.0, 0.0]);
        let e = [0.4, -1.1];
        let one = eps_to_score(&e, 10, &s).unwrap();
        let two = eps_to_score(&[0.8, -2.2], 10, &s).unwrap();
        assert_eq!(two, vec![2.0 * one[0], 2.0 * one[1]]);
        assert!(matches!(eps_to_score(&e, 0, &s), Err(Error::Singularity(_))));
    }

    #[test]
    fn score_of_standard_normal_data() {
        // With z0 ~ N(0, I) the noised marginal stays N(0, I), its score is -z,
        // and the exact posterior-mean noise is sigma_t * z_t.
        let s = Schedule::new(200, ScheduleKind::Cosine).unwrap();
        for t in [1, 50, 120, 200] {
            let z = [0.7, -1.9, 0.05];
            let eps_hat: Vec<f64> = z.iter().map(|v| s.sigma(t) * v).collect();
            let score = eps_to_score(&eps_hat, t, &s).unwrap();
            for (a, b) in score.iter().zip(z) {
                assert!((a + b).abs() < 1e-12);
            }
        }
    }
}
