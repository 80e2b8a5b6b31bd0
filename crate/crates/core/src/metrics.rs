//! Analytic scores for generated samples: subject fidelity against the
//! reference set and prompt alignment against the superclass density.

use std::path::Path;

use ndarray::Array2;

use crate::concepts::{quantile, World};
use crate::condition::{Concept, Condition, Context};
use crate::diffusion::{sample, GuidanceMode, GuidanceSpec, NoisePredictor, Sampler, Schedule};
use crate::error::{Error, Result};
use crate::rng::{mix, stream, tags};

pub const CALIBRATION_SAMPLES: usize = 10_000;
pub const ALIGNMENT_QUANTILE: f64 = 0.05;

/// Per `(class, context)` log-density thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentThresholds {
    n_contexts: usize,
    values: Vec<f64>,
}

impl AlignmentThresholds {
    pub fn get(&self, class: usize, context: Context) -> Result<f64> {
        let j = context.index();
        if j > self.n_contexts {
            return Err(Error::Range(format!("context {context} not calibrated")));
        }
        self.values
            .get(class * (self.n_contexts + 1) + j)
            .copied()
            .ok_or_else(|| Error::Range(format!("class {class} not calibrated")))
    }
}

/// 5th percentile of each class's log density over true samples, per
/// context. The same underlying draws are pushed through every context.
pub fn calibrate_thresholds(world: &World, seed: u64) -> Result<AlignmentThresholds> {
    let nc = world.n_contexts();
    let mut values = Vec::with_capacity(world.n_classes() * (nc + 1));
    for k in 0..world.n_classes() {
        let mut rng = stream(mix(seed, k as u64), tags::CALIBRATE);
        let xs: Vec<Vec<f64>> = (0..CALIBRATION_SAMPLES)
            .map(|_| world.class(k).sample(&mut rng))
            .collect();
        for ctx in world.all_contexts() {
            let mut ld = xs
                .iter()
                .map(|x| world.class_log_density(k, ctx, &world.context_apply(ctx, x)?))
                .collect::<Result<Vec<_>>>()?;
            values.push(quantile(&mut ld, ALIGNMENT_QUANTILE));
        }
    }
    Ok(AlignmentThresholds { n_contexts: nc, values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fidelity {
    pub nn: f64,
    pub mmd: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Median pairwise distance, or 1 when there are fewer than two points.
pub fn median_distance(points: &[Vec<f64>]) -> f64 {
    let mut dists = Vec::with_capacity(points.len() * points.len() / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            dists.push(dist(&points[i], &points[j]));
        }
    }
    if dists.is_empty() {
        1.0
    } else {
        quantile(&mut dists, 0.5)
    }
}

/// Mean RBF kernel values `(k_xx, k_yy, k_xy)` with kernel
/// `exp(-|a - b|^2 / (2 h^2))`.
fn kernel_means(xs: &[Vec<f64>], ys: &[Vec<f64>], bandwidth: f64) -> (f64, f64, f64) {
    let h2 = 2.0 * (bandwidth * bandwidth).max(1e-24);
    let k = |a: &[f64], b: &[f64]| (-dist(a, b).powi(2) / h2).exp();
    let mean_k = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        a.iter().map(|x| b.iter().map(|y| k(x, y)).sum::<f64>()).sum::<f64>() / (a.len() * b.len()) as f64
    };
    (mean_k(xs, xs), mean_k(ys, ys), mean_k(xs, ys))
}

/// Biased RBF-kernel MMD.
pub fn mmd_rbf(xs: &[Vec<f64>], ys: &[Vec<f64>], bandwidth: f64) -> f64 {
    let (kxx, kyy, kxy) = kernel_means(xs, ys, bandwidth);
    (kxx + kyy - 2.0 * kxy).max(0.0).sqrt()
}

/// MMD divided by its value for the same two sets moved infinitely far
/// apart, `sqrt(k_xx + k_yy)`. Lies in `[0, 1]`.
pub fn normalized_mmd(xs: &[Vec<f64>], ys: &[Vec<f64>], bandwidth: f64) -> f64 {
    let (kxx, kyy, kxy) = kernel_means(xs, ys, bandwidth);
    ((kxx + kyy - 2.0 * kxy).max(0.0) / (kxx + kyy)).sqrt().min(1.0)
}

/// Fidelity of samples generated in `context` to the subject references.
pub fn fidelity(samples: &[Vec<f64>], world: &World, context: Context) -> Result<Fidelity> {
    if samples.is_empty() {
        return Err(Error::Config("fidelity of an empty sample set".into()));
    }
    let refs = world.references()?;
    let inverted = samples
        .iter()
        .map(|y| world.context_invert(context, y))
        .collect::<Result<Vec<_>>>()?;
    let nn = inverted
        .iter()
        .map(|x| (-refs.iter().map(|r| dist(x, r)).fold(f64::INFINITY, f64::min)).exp())
        .sum::<f64>()
        / inverted.len() as f64;
    // Bandwidth from the references alone, so it does not grow with the
    // distance between generations and references.
    let mmd = (1.0 - normalized_mmd(&inverted, refs, median_distance(refs))).clamp(0.0, 1.0);
    Ok(Fidelity { nn, mmd })
}

/// Fraction of samples that are typical for `class` in `context`.
pub fn alignment(
    samples: &[Vec<f64>],
    world: &World,
    class: usize,
    context: Context,
    thresholds: &AlignmentThresholds,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let tau = thresholds.get(class, context)?;
    let mut hits = 0usize;
    for x in samples {
        if world.class_log_density(class, context, x)? >= tau {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub contexts: Vec<Context>,
    pub n_per_context: usize,
    pub sampler: Sampler,
    pub seed: u64,
    /// Concept sampled; alignment is always scored against the subject's class.
    pub concept: Concept,
    /// Inference-time switching: anchor concept for the first fraction of steps.
    pub switch_frac: Option<f64>,
}

impl EvalConfig {
    pub fn new(world: &World, seed: u64) -> Self {
        Self {
            contexts: world.all_contexts(),
            n_per_context: 256,
            sampler: Sampler::Ddpm,
            seed,
            concept: Concept::Subject,
            switch_frac: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextScore {
    pub context: Context,
    pub fidelity_nn: f64,
    pub fidelity_mmd: f64,
    pub alignment: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_context: Vec<ContextScore>,
}

impl EvalReport {
    fn mean_over(&self, keep: impl Fn(&ContextScore) -> bool, f: impl Fn(&ContextScore) -> f64) -> f64 {
        let sel: Vec<f64> = self.per_context.iter().filter(|c| keep(c)).map(f).collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }

    pub fn fidelity_nn(&self) -> f64 {
        self.mean_over(|_| true, |c| c.fidelity_nn)
    }

    pub fn fidelity_mmd(&self) -> f64 {
        self.mean_over(|_| true, |c| c.fidelity_mmd)
    }

    pub fn alignment(&self) -> f64 {
        self.mean_over(|_| true, |c| c.alignment)
    }

    /// Mean alignment over non-plain contexts, none of which the subject was
    /// trained in.
    pub fn unseen_alignment(&self) -> f64 {
        self.mean_over(|c| c.context != Context::Plain, |c| c.alignment)
    }

    pub fn context(&self, context: Context) -> Option<&ContextScore> {
        self.per_context.iter().find(|c| c.context == context)
    }

    pub fn n_samples(&self) -> usize {
        self.per_context.iter().map(|c| c.n).sum()
    }
}

/// Sample the model in every requested context and score the draws.
pub fn evaluate_method<P: NoisePredictor>(
    model: &P,
    world: &World,
    sched: &Schedule,
    thresholds: &AlignmentThresholds,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.n_per_context == 0 || cfg.contexts.is_empty() {
        return Err(Error::Config("evaluation needs contexts and samples".into()));
    }
    let class = match cfg.concept {
        Concept::Class(k) => k,
        _ => world.subject()?.base_class,
    };
    let mut per_context = Vec::with_capacity(cfg.contexts.len());
    for &ctx in &cfg.contexts {
        world.check_condition(Condition::new(cfg.concept, ctx))?;
        let primary = Condition::new(cfg.concept, ctx);
        let guidance = match cfg.switch_frac {
            Some(f) => GuidanceSpec {
                mode: GuidanceMode::Switch(f),
                primary,
                anchor: Condition::class(class, ctx),
            },
            None => GuidanceSpec::plain(primary),
        };
        let seed = mix(mix(cfg.seed, tags::EVAL), ctx.index() as u64);
        let draws: Array2<f64> = sample(model, &guidance, cfg.n_per_context, cfg.sampler, sched, seed)?;
        let xs: Vec<Vec<f64>> = draws.rows().into_iter().map(|r| r.to_vec()).collect();
        let fid = match cfg.concept {
            Concept::Subject | Concept::Class(_) if world.subject().is_ok() => fidelity(&xs, world, ctx)?,
            _ => Fidelity { nn: 0.0, mmd: 0.0 },
        };
        per_context.push(ContextScore {
            context: ctx,
            fidelity_nn: fid.nn,
            fidelity_mmd: fid.mmd,
            alignment: alignment(&xs, world, class, ctx, thresholds)?,
            n: xs.len(),
        });
    }
    Ok(EvalReport { per_context })
}

pub const METRICS_HEADER: &str = "method,w,seed,context,fidelity_nn,fidelity_mmd,alignment,n";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub w: f64,
    pub seed: u64,
    pub score: ContextScore,
}

pub fn metrics_rows(method: &str, w: f64, seed: u64, report: &EvalReport) -> Vec<MetricsRow> {
    report
        .per_context
        .iter()
        .map(|&score| MetricsRow {
            method: method.to_string(),
            w,
            seed,
            score,
        })
        .collect()
}

pub fn format_metrics_row(r: &MetricsRow) -> String {
    format!(
        "{},{:?},{},{},{:?},{:?},{:?},{}",
        r.method, r.w, r.seed, r.score.context, r.score.fidelity_nn, r.score.fidelity_mmd, r.score.alignment, r.score.n
    )
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format_metrics_row(r));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bad = |msg: String| Error::parse(path.display().to_string(), msg);
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 8 {
            return Err(bad(format!("row {i}: expected 8 fields")));
        }
        let num = |j: usize| rec[j].parse::<f64>().map_err(|e| bad(format!("row {i}: {e}")));
        rows.push(MetricsRow {
            method: rec[0].to_string(),
            w: num(1)?,
            seed: rec[2].parse().map_err(|e| bad(format!("row {i}: {e}")))?,
            score: ContextScore {
                context: rec[3].parse().map_err(|_| bad(format!("row {i}: bad context")))?,
                fidelity_nn: num(4)?,
                fidelity_mmd: num(5)?,
                alignment: num(6)?,
                n: rec[7].parse().map_err(|e| bad(format!("row {i}: {e}")))?,
            },
        });
    }
    Ok(rows)
}
