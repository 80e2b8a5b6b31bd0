//! Drift probes: distances between the true noise, the personalised subject
//! prediction and the frozen anchor prediction on a fixed probe batch.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::concepts::World;
use crate::condition::{Condition, Context};
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::model::DenoiserModel;
use crate::rng::{normal, stream, tags};

/// Which latent the anchor branch sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorLatent {
    /// Same noisy subject latent as the subject branch.
    #[default]
    Subject,
    /// Noised prior-set samples with the same noise and timestep.
    PriorSet,
}

/// Fixed probe batch: reference latents, noise draws and stratified timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub ts: Vec<usize>,
    pub eps: Array2<f64>,
    pub z_subject: Array2<f64>,
    pub z_anchor: Array2<f64>,
    pub anchor_latent: AnchorLatent,
}

impl ProbeSet {
    pub const DEFAULT_SIZE: usize = 256;
    pub const DEFAULT_BINS: usize = 8;

    /// `size` probes, timesteps stratified over `bins` equal-width bins of
    /// `[1, T]`, references cycled in order.
    pub fn new(world: &World, sched: &Schedule, size: usize, bins: usize, seed: u64) -> Result<Self> {
        if size == 0 || bins == 0 || bins > sched.total() {
            return Err(Error::Config("probe set needs size > 0 and 1 <= bins <= T".into()));
        }
        let refs = world.references()?;
        let d = world.dim();
        let total = sched.total();
        let mut rng = stream(seed, tags::PROBE);
        let mut ts = Vec::with_capacity(size);
        let mut eps = Array2::zeros((size, d));
        let mut z = Array2::zeros((size, d));
        for i in 0..size {
            let b = i % bins;
            let lo = 1 + b * total / bins;
            let hi = ((b + 1) * total / bins).max(lo);
            let t = rng.random_range(lo..=hi);
            ts.push(t);
            let r = &refs[i % refs.len()];
            for k in 0..d {
                let e = normal(&mut rng);
                eps[[i, k]] = e;
                z[[i, k]] = sched.alpha(t) * r[k] + sched.sigma(t) * e;
            }
        }
        Ok(Self {
            ts,
            eps,
            z_anchor: z.clone(),
            z_subject: z,
            anchor_latent: AnchorLatent::Subject,
        })
    }

    /// Switch the anchor branch to noised prior samples (cycled), reusing the
    /// probe noise and timesteps.
    pub fn with_prior_latents(mut self, prior: &[Vec<f64>], sched: &Schedule) -> Result<Self> {
        if prior.is_empty() {
            return Err(Error::Config("empty prior set".into()));
        }
        for i in 0..self.ts.len() {
            let t = self.ts[i];
            let x = &prior[i % prior.len()];
            for (k, xk) in x.iter().enumerate() {
                self.z_anchor[[i, k]] = sched.alpha(t) * xk + sched.sigma(t) * self.eps[[i, k]];
            }
        }
        self.anchor_latent = AnchorLatent::PriorSet;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsRecord {
    pub step: usize,
    /// Mean distance between true noise and subject prediction.
    pub d1: f64,
    /// Mean distance between subject prediction and frozen anchor prediction.
    pub d2: f64,
    /// Mean distance between true noise and frozen anchor prediction.
    pub d3: f64,
    pub diff_b: f64,
    pub diff_c: f64,
}

fn mean_row_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.nrows();
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}

/// Evaluate all drift statistics. The anchor branch is always the frozen model.
pub fn probe(
    theta: &DenoiserModel,
    theta_prime: &DenoiserModel,
    anchor_class: usize,
    probes: &ProbeSet,
    step: usize,
) -> Result<DynamicsRecord> {
    let n = probes.len();
    let sbj = theta.predict(
        probes.z_subject.view(),
        &probes.ts,
        &vec![Condition::subject(Context::Plain); n],
    )?;
    let anc = theta_prime.predict(
        probes.z_anchor.view(),
        &probes.ts,
        &vec![Condition::class(anchor_class, Context::Plain); n],
    )?;
    let d1 = mean_row_distance(&probes.eps, &sbj);
    let d2 = mean_row_distance(&sbj, &anc);
    let d3 = mean_row_distance(&probes.eps, &anc);
    Ok(DynamicsRecord {
        step,
        d1,
        d2,
        d3,
        diff_b: d1 - d3,
        diff_c: d1 - d2,
    })
}

/// Mean of `field` over the last 20% of records (at least one).
pub fn final_window_mean(records: &[DynamicsRecord], field: impl Fn(&DynamicsRecord) -> f64) -> f64 {
    let n = records.len();
    if n == 0 {
        return f64::NAN;
    }
    let w = ((n as f64) * 0.2).ceil().max(1.0) as usize;
    records[n - w..].iter().map(&field).sum::<f64>() / w as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftSummary {
    /// `(method, final-window mean D2)`, least drift first.
    pub ranking: Vec<(String, f64)>,
}

impl DriftSummary {
    pub fn drift_of(&self, method: &str) -> Option<f64> {
        self.ranking.iter().find(|(m, _)| m == method).map(|(_, d)| *d)
    }
}

/// Order methods by final-window D2. All runs must share a probe schedule.
pub fn compare_drift(records_by_method: &[(String, Vec<DynamicsRecord>)]) -> Result<DriftSummary> {
    if records_by_method.len() < 2 {
        return Err(Error::Config("drift comparison needs at least two methods".into()));
    }
    let steps = |r: &[DynamicsRecord]| r.iter().map(|x| x.step).collect::<Vec<_>>();
    let reference = steps(&records_by_method[0].1);
    for (m, r) in records_by_method {
        if steps(r) != reference {
            return Err(Error::Config(format!("method {m} was probed on a different schedule")));
        }
    }
    let mut ranking: Vec<(String, f64)> = records_by_method
        .iter()
        .map(|(m, r)| (m.clone(), final_window_mean(r, |x| x.d2)))
        .collect();
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(DriftSummary { ranking })
}

pub const DYNAMICS_HEADER: &str = "method,seed,step,D1,D2,D3,diff_b,diff_c";

pub fn write_dynamics_csv(path: &Path, rows: &[(String, u64, DynamicsRecord)]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from(DYNAMICS_HEADER);
    out.push('\n');
    for (m, seed, r) in rows {
        out.push_str(&format!(
            "{m},{seed},{},{:?},{:?},{:?},{:?},{:?}\n",
            r.step, r.d1, r.d2, r.d3, r.diff_b, r.diff_c
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_dynamics_csv(path: &Path) -> Result<Vec<(String, u64, DynamicsRecord)>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(path.display().to_string(), format!("bad field {i}")))
        };
        out.push((
            rec.get(0).unwrap_or_default().to_string(),
            f(1)? as u64,
            DynamicsRecord {
                step: f(2)? as usize,
                d1: f(3)?,
                d2: f(4)?,
                d3: f(5)?,
                diff_b: f(6)?,
                diff_c: f(7)?,
            },
        ));
    }
    Ok(out)
}
