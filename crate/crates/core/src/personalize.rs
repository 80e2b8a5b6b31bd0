//! Training loops: pretraining the base denoiser, snapshotting it into a
//! trainable/frozen pair, the four personalisation methods and the
//! anchor-weight sweep.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::concepts::{TrainExample, World};
use crate::condition::{Concept, Condition, Context};
use crate::diffusion::{sample, GuidanceMode, GuidanceSpec, Sampler, Schedule};
use crate::dynamics::{probe, DynamicsRecord, ProbeSet};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_method, AlignmentThresholds, EvalConfig, EvalReport};
use crate::model::{DenoiserModel, ModelConfig, TrainScope};
use crate::nn::{adam_step, AdamConfig, AdamState};
use crate::objectives::{LossBreakdown, Method, ObjectiveConfig};
use crate::rng::{normal, stream, tags, LabRng};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of replacing the concept by `Null` (for guidance).
    pub null_prob: f64,
    /// Upper bound on the mean loss over the final 500 steps.
    pub loss_ceiling: f64,
    pub hidden: Vec<usize>,
    /// Learning rate at the last step as a fraction of `lr` (cosine decay).
    pub final_lr_frac: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 128,
            lr: 1e-3,
            seed: 0,
            null_prob: 0.1,
            loss_ceiling: 1.0,
            hidden: vec![128, 128],
            final_lr_frac: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: DenoiserModel,
    /// Mean per-example squared error at every step.
    pub losses: Vec<f64>,
}

/// Noise a batch of clean latents with per-example uniform timesteps.
fn noise_batch(z0: &[&[f64]], sched: &Schedule, rng: &mut LabRng) -> (Array2<f64>, Vec<usize>, Array2<f64>) {
    let n = z0.len();
    let d = z0.first().map_or(0, |z| z.len());
    let mut z = Array2::zeros((n, d));
    let mut eps = Array2::zeros((n, d));
    let mut ts = Vec::with_capacity(n);
    for (i, x) in z0.iter().enumerate() {
        let t = rng.random_range(1..=sched.total());
        ts.push(t);
        for k in 0..d {
            let e = normal(rng);
            eps[[i, k]] = e;
            z[[i, k]] = sched.alpha(t) * x[k] + sched.sigma(t) * e;
        }
    }
    (z, ts, eps)
}

fn check_finite(value: f64, step: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} loss became {value} at step {step}")))
    }
}

/// Mean of a slice's tail of length `window` (or all of it).
pub fn tail_mean(values: &[f64], window: usize) -> f64 {
    let w = window.min(values.len()).max(1);
    values[values.len().saturating_sub(w)..].iter().sum::<f64>() / w as f64
}

/// Cosine decay from `lr` at step 0 to `lr * final_frac` at the last step.
pub fn cosine_lr(lr: f64, final_frac: f64, step: usize, steps: usize) -> f64 {
    let progress = if steps > 1 {
        step as f64 / (steps - 1) as f64
    } else {
        1.0
    };
    let floor = lr * final_frac;
    floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Train the base model on the world's `(class, context)` data with
/// concept dropout.
pub fn pretrain(world: &World, sched: &Schedule, cfg: &PretrainConfig) -> Result<Pretrained> {
    if cfg.steps == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("pretrain needs positive steps, batch and lr".into()));
    }
    if !(0.0..=1.0).contains(&cfg.final_lr_frac) {
        return Err(Error::Config(format!(
            "final_lr_frac must lie in [0, 1], got {}",
            cfg.final_lr_frac
        )));
    }
    let mut mcfg = ModelConfig::new(world.dim(), world.n_classes(), world.n_contexts(), sched.total());
    mcfg.hidden = cfg.hidden.clone();
    let mut model = DenoiserModel::new(mcfg, &mut stream(cfg.seed, tags::MODEL_INIT))?;
    let mut rng = stream(cfg.seed, tags::PRETRAIN);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = world.sample_pretrain_batch(cfg.batch, cfg.null_prob, &mut rng);
        let z0: Vec<&[f64]> = batch.iter().map(|e| e.z0.as_slice()).collect();
        let conds: Vec<Condition> = batch.iter().map(|e| e.cond).collect();
        let (z, ts, eps) = noise_batch(&z0, sched, &mut rng);
        model.zero_grad();
        let pred = model.predict_train(z.view(), &ts, &conds)?;
        let diff = &pred - &eps;
        let n = cfg.batch as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
        check_finite(loss, step, "pretraining")?;
        losses.push(loss);
        model.backward((diff * (2.0 / n)).view())?;
        adam.config.lr = cosine_lr(cfg.lr, cfg.final_lr_frac, step, cfg.steps);
        adam_step(&mut model.trainable_mut(TrainScope::Full), &mut adam)?;
    }
    let final_loss = tail_mean(&losses, 500);
    if final_loss > cfg.loss_ceiling {
        return Err(Error::Divergence(format!(
            "final pretraining loss {final_loss:.4} above ceiling {}",
            cfg.loss_ceiling
        )));
    }
    model.set_trained(true);
    Ok(Pretrained { model, losses })
}

/// Trainable model `theta` plus the frozen pretrained copy `theta_prime`.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub theta: DenoiserModel,
    theta_prime: DenoiserModel,
    anchor_class: usize,
}

impl ModelPair {
    pub fn theta_prime(&self) -> &DenoiserModel {
        &self.theta_prime
    }

    pub fn anchor_class(&self) -> usize {
        self.anchor_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    pub rank: usize,
    pub scale: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, scale: 1.0 }
    }
}

/// Freeze a copy of `model`, register the subject token with the embedding
/// of `CLASS(anchor_class)` and attach zero-initialised adapters.
pub fn snapshot(model: &DenoiserModel, anchor_class: usize, adapters: AdapterConfig, seed: u64) -> Result<ModelPair> {
    if !model.is_finite() {
        return Err(Error::Numeric("snapshot of a non-finite model".into()));
    }
    if model.has_subject() || model.has_adapters() {
        return Err(Error::State("snapshot expects a plain pretrained model".into()));
    }
    let mut theta = model.clone();
    theta.add_subject_from_class(anchor_class)?;
    if adapters.rank > 0 {
        theta.attach_adapters(adapters.rank, adapters.scale, &mut stream(seed, tags::LORA_INIT));
    }
    Ok(ModelPair {
        theta,
        theta_prime: model.clone(),
        anchor_class,
    })
}

/// Class samples drawn once from the frozen model for prior preservation.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    pub class: usize,
    pub seed: u64,
    pub samples: Vec<Vec<f64>>,
}

pub const PRIOR_SET_SIZE: usize = 200;
pub const PRIOR_DDIM_STEPS: usize = 50;

pub fn build_prior_set(
    theta_prime: &DenoiserModel,
    class: usize,
    m: usize,
    sched: &Schedule,
    seed: u64,
) -> Result<PriorSet> {
    if m == 0 {
        return Err(Error::Config("prior set size must be positive".into()));
    }
    let guidance = GuidanceSpec {
        mode: GuidanceMode::Cfg(1.0),
        ..GuidanceSpec::plain(Condition::class(class, Context::Plain))
    };
    let seed_stream = stream(seed, tags::PRIOR_SET).random::<u64>();
    let out = sample(
        theta_prime,
        &guidance,
        m,
        Sampler::Ddim(PRIOR_DDIM_STEPS),
        sched,
        seed_stream,
    )?;
    Ok(PriorSet {
        class,
        seed,
        samples: out.rows().into_iter().map(|r| r.to_vec()).collect(),
    })
}

impl PriorSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let conds = vec![Condition::class(self.class, Context::Plain); self.samples.len()];
        write_samples_csv(path, &self.samples, &conds)
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let (samples, conds) = read_samples_csv(path)?;
        let class = match conds.first().map(|c| c.concept) {
            Some(Concept::Class(k)) => k,
            _ => {
                return Err(Error::parse(
                    path.display().to_string(),
                    "prior set rows must be class samples",
                ))
            }
        };
        Ok(Self { class, seed, samples })
    }
}

/// `sample_id,dim_0,..,dim_{d-1},concept,context`.
pub fn write_samples_csv(path: &Path, samples: &[Vec<f64>], conds: &[Condition]) -> Result<()> {
    let d = samples.first().map_or(0, Vec::len);
    let mut out = String::from("sample_id");
    for k in 0..d {
        out.push_str(&format!(",dim_{k}"));
    }
    out.push_str(",concept,context\n");
    for (i, (x, c)) in samples.iter().zip(conds).enumerate() {
        out.push_str(&i.to_string());
        for v in x {
            out.push_str(&format!(",{v:?}"));
        }
        out.push_str(&format!(",{},{}\n", c.concept, c.context));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn parse_concept(s: &str) -> Option<Concept> {
    match s {
        "null" => Some(Concept::Null),
        "subject" => Some(Concept::Subject),
        _ => s.strip_prefix("class").and_then(|k| k.parse().ok()).map(Concept::Class),
    }
}

pub fn read_samples_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<Condition>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bad = |msg: String| Error::parse(path.display().to_string(), msg);
    let mut rdr = csv::Reader::from_path(path)?;
    let d = rdr
        .headers()?
        .len()
        .checked_sub(3)
        .ok_or_else(|| bad("too few columns".into()))?;
    let (mut samples, mut conds) = (Vec::new(), Vec::new());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let x = (0..d)
            .map(|k| rec[k + 1].parse::<f64>().map_err(|e| bad(format!("row {line}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let concept = parse_concept(&rec[d + 1]).ok_or_else(|| bad(format!("row {line}: bad concept")))?;
        let context: Context = rec[d + 2]
            .parse()
            .map_err(|_| bad(format!("row {line}: bad context")))?;
        samples.push(x);
        conds.push(Condition::new(concept, context));
    }
    Ok((samples, conds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizeConfig {
    pub objective: ObjectiveConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// 0 disables probing.
    pub probe_every: usize,
    pub scope: TrainScope,
}

impl PersonalizeConfig {
    pub fn new(objective: ObjectiveConfig, seed: u64) -> Self {
        Self {
            objective,
            steps: 1000,
            batch: 16,
            lr: 1e-3,
            seed,
            probe_every: 50,
            scope: TrainScope::Adapter,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Personalized {
    pub model: DenoiserModel,
    pub dynamics: Vec<DynamicsRecord>,
    /// Batch means of each loss term, one entry per optimiser step.
    pub losses: Vec<LossBreakdown>,
}

/// Epoch-wise shuffled index stream over the prior set.
struct PriorCursor {
    order: Vec<usize>,
    pos: usize,
    rng: LabRng,
}

impl PriorCursor {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = stream(seed, tags::PRIOR_BATCH);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn row_sq(a: &Array2<f64>, b: &Array2<f64>, i: usize) -> f64 {
    a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Adapt `pair.theta` to the subject. `theta_prime` is only read.
pub fn personalize(
    pair: &ModelPair,
    world: &World,
    sched: &Schedule,
    cfg: &PersonalizeConfig,
    prior: Option<&PriorSet>,
    probes: Option<&ProbeSet>,
) -> Result<Personalized> {
    let method = cfg.objective.method;
    let w = cfg.objective.w;
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("personalize needs positive batch and lr".into()));
    }
    let prior = match (method, prior) {
        (Method::ReconPpl, None) => return Err(Error::Config("recon_ppl needs a prior set".into())),
        (Method::ReconPpl, Some(p)) if p.samples.is_empty() => {
            return Err(Error::Config("recon_ppl needs a non-empty prior set".into()))
        }
        (_, p) => p,
    };
    let k = pair.anchor_class;
    let mut theta = pair.theta.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = stream(cfg.seed, tags::PERSONALIZE);
    let mut cursor = prior.map(|p| PriorCursor::new(p.samples.len(), cfg.seed));
    let mut ppl_rng = stream(cfg.seed, tags::PRIOR_BATCH ^ 0x100);
    let mut dynamics = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let b = cfg.batch;
    let n = b as f64;
    let d = world.dim();
    let sbj = vec![Condition::subject(Context::Plain); b];
    let cls = vec![Condition::class(k, Context::Plain); b];

    for step in 0..=cfg.steps {
        if let Some(p) = probes {
            if cfg.probe_every > 0 && (step % cfg.probe_every == 0 || step == cfg.steps) {
                dynamics.push(probe(&theta, &pair.theta_prime, k, p, step)?);
            }
        }
        if step == cfg.steps {
            break;
        }
        let batch: Vec<TrainExample> = world.subject_batch(b, &mut rng)?;
        let z0: Vec<&[f64]> = batch.iter().map(|e| e.z0.as_slice()).collect();
        let (z, ts, eps) = noise_batch(&z0, sched, &mut rng);
        theta.zero_grad();
        let mut terms = LossBreakdown::default();
        match method {
            Method::Recon | Method::Anchored => {
                let anchor = match method {
                    Method::Anchored => Some(pair.theta_prime.predict(z.view(), &ts, &cls)?),
                    _ => None,
                };
                let pred = theta.predict_train(z.view(), &ts, &sbj)?;
                let mut grad = Array2::zeros((b, d));
                for i in 0..b {
                    terms.recon_term += row_sq(&pred, &eps, i) / n;
                    for j in 0..d {
                        grad[[i, j]] = 2.0 * (pred[[i, j]] - eps[[i, j]]) / n;
                    }
                    if let Some(a) = &anchor {
                        terms.anchor_term += row_sq(&pred, a, i) / n;
                        for j in 0..d {
                            grad[[i, j]] += w * 2.0 * (pred[[i, j]] - a[[i, j]]) / n;
                        }
                    }
                }
                theta.backward(grad.view())?;
            }
            Method::AnchoredFt => {
                let zz = ndarray::concatenate![ndarray::Axis(0), z, z];
                let tt: Vec<usize> = ts.iter().chain(&ts).copied().collect();
                let cc: Vec<Condition> = sbj.iter().chain(&cls).copied().collect();
                let out = theta.predict_train(zz.view(), &tt, &cc)?;
                let pred = out.slice(ndarray::s![..b, ..]).to_owned();
                let anchor = out.slice(ndarray::s![b.., ..]).to_owned();
                let mut grad = Array2::zeros((2 * b, d));
                for i in 0..b {
                    terms.recon_term += row_sq(&pred, &eps, i) / n;
                    terms.anchor_term += row_sq(&pred, &anchor, i) / n;
                    for j in 0..d {
                        let pa = w * 2.0 * (pred[[i, j]] - anchor[[i, j]]) / n;
                        grad[[i, j]] = 2.0 * (pred[[i, j]] - eps[[i, j]]) / n + pa;
                        grad[[b + i, j]] = -pa;
                    }
                }
                theta.backward(grad.view())?;
            }
            Method::ReconPpl => {
                let prior = prior.expect("checked above");
                let cursor = cursor.as_mut().expect("created with the prior set");
                let picks: Vec<&[f64]> = (0..b).map(|_| prior.samples[cursor.next()].as_slice()).collect();
                let (zp, tp, ep) = noise_batch(&picks, sched, &mut ppl_rng);
                let zz = ndarray::concatenate![ndarray::Axis(0), z, zp];
                let tt: Vec<usize> = ts.iter().chain(&tp).copied().collect();
                let prior_cls = vec![Condition::class(prior.class, Context::Plain); b];
                let cc: Vec<Condition> = sbj.iter().chain(&prior_cls).copied().collect();
                let out = theta.predict_train(zz.view(), &tt, &cc)?;
                let ppl_w = cfg.objective.ppl_weight;
                let mut grad = Array2::zeros((2 * b, d));
                for i in 0..b {
                    terms.recon_term += row_sq(&out, &eps, i) / n;
                    terms.ppl_term += (0..d).map(|j| (out[[b + i, j]] - ep[[i, j]]).powi(2)).sum::<f64>() / n;
                    for j in 0..d {
                        grad[[i, j]] = 2.0 * (out[[i, j]] - eps[[i, j]]) / n;
                        grad[[b + i, j]] = ppl_w * 2.0 * (out[[b + i, j]] - ep[[i, j]]) / n;
                    }
                }
                theta.backward(grad.view())?;
            }
        }
        terms.total = terms.recon_term + w * terms.anchor_term + cfg.objective.ppl_weight * terms.ppl_term;
        if method == Method::Recon || method == Method::ReconPpl {
            terms.total = terms.recon_term + cfg.objective.ppl_weight * terms.ppl_term;
        }
        check_finite(terms.total, step, method.name())?;
        losses.push(terms);
        adam_step(&mut theta.trainable_mut(cfg.scope), &mut adam)?;
    }
    Ok(Personalized {
        model: theta,
        dynamics,
        losses,
    })
}

pub const LOSS_HEADER: &str = "step,total,recon,anchor,ppl";

pub fn write_loss_csv(path: &Path, losses: &[LossBreakdown]) -> Result<()> {
    let mut out = String::from(LOSS_HEADER);
    out.push('\n');
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!(
            "{i},{:?},{:?},{:?},{:?}\n",
            l.total, l.recon_term, l.anchor_term, l.ppl_term
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_pretrain_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l:?}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub const DEFAULT_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Shared settings for every cell of an anchor-weight sweep.
#[derive(Debug, Clone)]
pub struct SweepSetup<'a> {
    pub pretrained: &'a DenoiserModel,
    pub world: &'a World,
    pub sched: &'a Schedule,
    pub thresholds: &'a AlignmentThresholds,
    pub adapters: AdapterConfig,
    /// Template for each cell; objective and seed are overwritten.
    pub base: PersonalizeConfig,
    pub n_per_context: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub w: f64,
    pub seed: u64,
    pub report: EvalReport,
}

/// One `(w, seed)` cell: fresh snapshot, anchored personalisation, evaluation.
pub fn run_sweep_cell(setup: &SweepSetup<'_>, w: f64, seed: u64) -> Result<SweepCell> {
    let k = setup.world.subject()?.base_class;
    let pair = snapshot(setup.pretrained, k, setup.adapters, seed)?;
    let cfg = PersonalizeConfig {
        objective: ObjectiveConfig::anchored(w)?,
        seed,
        ..setup.base.clone()
    };
    let mut model = personalize(&pair, setup.world, setup.sched, &cfg, None, None)?.model;
    model.set_trained(true);
    let mut eval = EvalConfig::new(setup.world, seed);
    eval.n_per_context = setup.n_per_context;
    let report = evaluate_method(&model, setup.world, setup.sched, setup.thresholds, &eval)?;
    Ok(SweepCell { w, seed, report })
}

/// Every `(w, seed)` pair of the grid, grid-major.
pub fn run_ablation_wsweep(setup: &SweepSetup<'_>, grid: &[f64], seeds: &[u64]) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::with_capacity(grid.len() * seeds.len());
    for &w in grid {
        for &seed in seeds {
            cells.push(run_sweep_cell(setup, w, seed)?);
        }
    }
    Ok(cells)
}
