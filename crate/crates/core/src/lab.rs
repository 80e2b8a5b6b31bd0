//! Run configuration and the commands behind the `anchorlab` binary.
//!
//! A run directory looks like
//!
//! ```text
//! out/
//!   world.txt  pretrained.ckpt  loss.csv  prior_set.csv
//!   <method>/  run.txt  model.ckpt  loss.csv  dynamics.csv  metrics.csv
//!   sweep.csv  sweep_metrics.csv  fig4.svg
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::concepts::{World, WorldConfig};
use crate::condition::Context;
use crate::diffusion::{Schedule, ScheduleKind};
use crate::dynamics::{read_dynamics_csv, write_dynamics_csv, ProbeSet};
use crate::error::{Error, Result};
use crate::metrics::{
    calibrate_thresholds, evaluate_method, metrics_rows, read_metrics_csv, write_metrics_csv, EvalConfig, MetricsRow,
};
use crate::model::{DenoiserModel, TrainScope};
use crate::objectives::{Method, ObjectiveConfig};
use crate::personalize::{
    build_prior_set, personalize, pretrain, run_sweep_cell, snapshot, write_loss_csv, write_pretrain_loss_csv,
    AdapterConfig, PersonalizeConfig, PretrainConfig, PriorSet, SweepSetup, DEFAULT_GRID, PRIOR_SET_SIZE,
};
use crate::stats::ranks;
use crate::svg::{chart, Series, Style};

/// Training methods plus the inference-only switching baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RunMethod {
    Train(Method),
    Beyond,
}

impl From<Method> for RunMethod {
    fn from(m: Method) -> Self {
        RunMethod::Train(m)
    }
}

impl RunMethod {
    pub const NAMES: &'static str = "recon|recon_ppl|anchored|anchored_ft|beyond";

    pub fn name(self) -> &'static str {
        match self {
            RunMethod::Train(m) => m.name(),
            RunMethod::Beyond => "beyond",
        }
    }

    pub fn all() -> Vec<RunMethod> {
        let mut v: Vec<RunMethod> = Method::ALL.into_iter().map(RunMethod::from).collect();
        v.push(RunMethod::Beyond);
        v
    }
}

impl fmt::Display for RunMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "beyond" {
            return Ok(RunMethod::Beyond);
        }
        s.parse::<Method>()
            .map(RunMethod::from)
            .map_err(|_| Error::Config(format!("unknown method `{s}`; valid methods: {}", Self::NAMES)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeLatent {
    Subject,
    Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizeSection {
    pub method: RunMethod,
    pub w: Option<f64>,
    pub lambda: Option<f64>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub rank: usize,
    pub probe_every: usize,
    pub tau_frac: f64,
    pub ppl_m: usize,
    pub probe_latent: ProbeLatent,
    pub full_finetune: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// `None` evaluates PLAIN and every world context.
    pub contexts: Option<Vec<Context>>,
    pub n_per_context: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub schedule_total: usize,
    pub schedule_kind: ScheduleKind,
    pub pretrain: PretrainConfig,
    pub personalize: PersonalizeSection,
    pub eval: EvalSection,
    pub grid: Vec<f64>,
    pub run_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            schedule_total: 200,
            schedule_kind: ScheduleKind::Cosine,
            pretrain: PretrainConfig::default(),
            personalize: PersonalizeSection {
                method: Method::Anchored.into(),
                w: None,
                lambda: None,
                steps: 1000,
                batch: 16,
                lr: 1e-3,
                rank: 4,
                probe_every: 50,
                tau_frac: 0.6,
                ppl_m: PRIOR_SET_SIZE,
                probe_latent: ProbeLatent::Subject,
                full_finetune: false,
            },
            eval: EvalSection {
                contexts: None,
                n_per_context: 256,
                seeds: vec![0, 1, 2, 3, 4],
            },
            grid: DEFAULT_GRID.to_vec(),
            run_seed: 0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

impl RunConfig {
    /// Parse `section.key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", no + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", no + 1)));
            }
            c.set(key, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", no + 1)),
                other => other,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.personalize;
        match key {
            "world.seed" => self.world.seed = parse_num(key, v)?,
            "world.d" => self.world.dim = parse_num(key, v)?,
            "world.K" => self.world.n_classes = parse_num(key, v)?,
            "world.n_contexts" => self.world.n_contexts = parse_num(key, v)?,
            "world.N_ref" => self.world.n_refs = parse_num(key, v)?,
            "world.components" => self.world.components_per_class = parse_num(key, v)?,
            "world.subject_offset_lo" => self.world.subject_offset.0 = parse_num(key, v)?,
            "world.subject_offset_hi" => self.world.subject_offset.1 = parse_num(key, v)?,
            "schedule.T" => self.schedule_total = parse_num(key, v)?,
            "schedule.kind" => self.schedule_kind = v.parse()?,
            "pretrain.steps" => self.pretrain.steps = parse_num(key, v)?,
            "pretrain.batch" => self.pretrain.batch = parse_num(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, v)?,
            "pretrain.null_prob" => self.pretrain.null_prob = parse_num(key, v)?,
            "pretrain.loss_ceiling" => self.pretrain.loss_ceiling = parse_num(key, v)?,
            "pretrain.final_lr_frac" => self.pretrain.final_lr_frac = parse_num(key, v)?,
            "personalize.method" => p.method = v.parse()?,
            "personalize.w" => p.w = Some(parse_num(key, v)?),
            "personalize.lambda" => p.lambda = Some(parse_num(key, v)?),
            "personalize.steps" => p.steps = parse_num(key, v)?,
            "personalize.batch" => p.batch = parse_num(key, v)?,
            "personalize.lr" => p.lr = parse_num(key, v)?,
            "personalize.rank" => p.rank = parse_num(key, v)?,
            "personalize.probe_every" => p.probe_every = parse_num(key, v)?,
            "personalize.tau_frac" => p.tau_frac = parse_num(key, v)?,
            "personalize.ppl_m" => p.ppl_m = parse_num(key, v)?,
            "personalize.probe_latent" => {
                p.probe_latent = match v {
                    "subject" => ProbeLatent::Subject,
                    "prior" => ProbeLatent::Prior,
                    _ => return Err(Error::Config(format!("`{key}`: expected subject or prior"))),
                }
            }
            "personalize.full_finetune" => p.full_finetune = parse_bool(key, v)?,
            "eval.contexts" => {
                self.eval.contexts = if v == "all" {
                    None
                } else {
                    Some(v.split(',').map(|x| x.trim().parse()).collect::<Result<_>>()?)
                }
            }
            "eval.n_per_context" => self.eval.n_per_context = parse_num(key, v)?,
            "eval.seeds" => self.eval.seeds = parse_list(key, v)?,
            "sweep.grid" => self.grid = parse_list(key, v)?,
            "run.seed" => self.run_seed = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        Schedule::new(self.schedule_total, self.schedule_kind)?;
        let p = &self.personalize;
        if let RunMethod::Train(m) = p.method {
            ObjectiveConfig::resolve(m, p.w, p.lambda)?;
        }
        if p.steps == 0 || p.batch == 0 || !(p.lr > 0.0) || self.pretrain.steps == 0 || self.pretrain.batch == 0 {
            return Err(Error::Config(
                "steps, batch sizes and learning rates must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pretrain.final_lr_frac) {
            return Err(Error::Config("pretrain.final_lr_frac must lie in [0, 1]".into()));
        }
        if !(p.tau_frac > 0.0 && p.tau_frac < 1.0) {
            return Err(Error::Config("personalize.tau_frac must lie in (0, 1)".into()));
        }
        if p.ppl_m == 0 || self.eval.n_per_context == 0 || self.eval.seeds.is_empty() || self.grid.is_empty() {
            return Err(Error::Config(
                "ppl_m, n_per_context, seeds and grid must be non-empty".into(),
            ));
        }
        if self.grid.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("sweep weights must be finite and >= 0".into()));
        }
        if let Some(ctx) = &self.eval.contexts {
            if ctx.iter().any(|c| c.index() > self.world.n_contexts) {
                return Err(Error::Config("eval.contexts names a context the world lacks".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.schedule_total, self.schedule_kind)
    }

    pub fn adapters(&self) -> AdapterConfig {
        AdapterConfig {
            rank: if self.personalize.full_finetune {
                0
            } else {
                self.personalize.rank
            },
            scale: 1.0,
        }
    }

    /// Objective for a training method; reconstruction-only methods carry `w = 0`.
    pub fn objective(&self, method: Method) -> Result<ObjectiveConfig> {
        let p = &self.personalize;
        match method {
            Method::Recon | Method::ReconPpl => ObjectiveConfig::new(method, 0.0),
            _ => ObjectiveConfig::resolve(method, p.w, p.lambda),
        }
    }

    pub fn personalize_config(&self, method: Method, seed: u64) -> Result<PersonalizeConfig> {
        let p = &self.personalize;
        Ok(PersonalizeConfig {
            objective: self.objective(method)?,
            steps: p.steps,
            batch: p.batch,
            lr: p.lr,
            seed,
            probe_every: p.probe_every,
            scope: if p.full_finetune {
                TrainScope::Full
            } else {
                TrainScope::Adapter
            },
        })
    }

    pub fn eval_config(&self, world: &World, seed: u64) -> EvalConfig {
        let mut e = EvalConfig::new(world, seed);
        if let Some(c) = &self.eval.contexts {
            e.contexts = c.clone();
        }
        e.n_per_context = self.eval.n_per_context;
        e
    }
}

/// Per-invocation overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub method: Option<String>,
    pub w: Option<f64>,
    pub seed: Option<u64>,
    pub tau: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(m) = &self.method {
            cfg.personalize.method = m.parse()?;
        }
        if let Some(w) = self.w {
            cfg.personalize.w = Some(w);
            cfg.personalize.lambda = None;
        }
        if let Some(s) = self.seed {
            cfg.run_seed = s;
        }
        if let Some(t) = self.tau {
            cfg.personalize.tau_frac = t;
        }
        cfg.validate()
    }
}

/// Exit status for an error: 2 config, 3 numeric divergence, 4 missing artifact.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::Divergence(_) | Error::Numeric(_) => 3,
        Error::MissingArtifact(_) => 4,
        _ => 1,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Small `key = value` record stored next to each method's artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInfo {
    pub method: RunMethod,
    pub w: f64,
    pub seed: u64,
    pub tau_frac: Option<f64>,
}

impl RunInfo {
    fn to_text(&self) -> String {
        let mut s = format!("method = {}\nw = {:?}\nseed = {}\n", self.method, self.w, self.seed);
        if let Some(t) = self.tau_frac {
            s.push_str(&format!("tau_frac = {t:?}\n"));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let bad = |m: &str| Error::parse(path.display().to_string(), m);
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| bad(&format!("missing `{k}`")));
        Ok(Self {
            method: get("method")?.parse()?,
            w: get("w")?.parse().map_err(|_| bad("bad w"))?,
            seed: get("seed")?.parse().map_err(|_| bad("bad seed"))?,
            tau_frac: map
                .get("tau_frac")
                .map(|t| t.parse())
                .transpose()
                .map_err(|_| bad("bad tau_frac"))?,
        })
    }

    fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Artifacts shared by every method in a run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn world_path(&self) -> PathBuf {
        self.root.join("world.txt")
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.root.join("pretrained.ckpt")
    }

    pub fn prior_path(&self) -> PathBuf {
        self.root.join("prior_set.csv")
    }

    pub fn method_dir(&self, m: RunMethod) -> PathBuf {
        self.root.join(m.name())
    }

    pub fn world(&self) -> Result<World> {
        World::load(&self.world_path())
    }

    pub fn pretrained(&self) -> Result<DenoiserModel> {
        DenoiserModel::load(&self.pretrained_path())
    }
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let dir = RunDir::new(out);
    let world = World::build(&cfg.world)?;
    let sched = cfg.schedule()?;
    let pcfg = PretrainConfig {
        seed: cfg.run_seed,
        ..cfg.pretrain.clone()
    };
    let pre = pretrain(&world, &sched, &pcfg)?;
    world.save(&dir.world_path())?;
    pre.model.save(&dir.pretrained_path())?;
    write_pretrain_loss_csv(&out.join("loss.csv"), &pre.losses)?;
    let k = world.subject()?.base_class;
    let prior = build_prior_set(&pre.model, k, cfg.personalize.ppl_m, &sched, cfg.run_seed)?;
    prior.save(&dir.prior_path())
}

pub fn cmd_personalize(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = RunDir::new(out);
    let world = dir.world()?;
    let pretrained = dir.pretrained()?;
    let sched = cfg.schedule()?;
    let seed = cfg.run_seed;
    let method = match cfg.personalize.method {
        RunMethod::Beyond => {
            let source = dir.method_dir(Method::Recon.into()).join("model.ckpt");
            if !source.exists() {
                return Err(Error::MissingArtifact(source));
            }
            let mdir = dir.method_dir(RunMethod::Beyond);
            create_dir(&mdir)?;
            let recon = RunInfo::load(&dir.method_dir(Method::Recon.into()).join("run.txt"))?;
            return RunInfo {
                method: RunMethod::Beyond,
                w: 0.0,
                seed: recon.seed,
                tau_frac: Some(cfg.personalize.tau_frac),
            }
            .save(&mdir.join("run.txt"));
        }
        RunMethod::Train(m) => m,
    };
    let k = world.subject()?.base_class;
    let needs_prior = method == Method::ReconPpl || cfg.personalize.probe_latent == ProbeLatent::Prior;
    let prior = if needs_prior {
        Some(PriorSet::load(&dir.prior_path(), cfg.run_seed)?)
    } else {
        None
    };
    let mut probes = ProbeSet::new(&world, &sched, ProbeSet::DEFAULT_SIZE, ProbeSet::DEFAULT_BINS, seed)?;
    if cfg.personalize.probe_latent == ProbeLatent::Prior {
        probes = probes.with_prior_latents(&prior.as_ref().expect("loaded above").samples, &sched)?;
    }
    let pair = snapshot(&pretrained, k, cfg.adapters(), seed)?;
    let pcfg = cfg.personalize_config(method, seed)?;
    let mut result = personalize(&pair, &world, &sched, &pcfg, prior.as_ref(), Some(&probes))?;
    result.model.set_trained(true);
    let mdir = dir.method_dir(method.into());
    create_dir(&mdir)?;
    result.model.save(&mdir.join("model.ckpt"))?;
    write_loss_csv(&mdir.join("loss.csv"), &result.losses)?;
    let rows: Vec<_> = result
        .dynamics
        .iter()
        .map(|r| (method.name().to_string(), seed, *r))
        .collect();
    write_dynamics_csv(&mdir.join("dynamics.csv"), &rows)?;
    RunInfo {
        method: method.into(),
        w: pcfg.objective.w,
        seed,
        tau_frac: None,
    }
    .save(&mdir.join("run.txt"))
}

/// Evaluate one method directory (or every method found) and write its
/// `metrics.csv`.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path, method: Option<RunMethod>) -> Result<Vec<MetricsRow>> {
    let dir = RunDir::new(out);
    let world = dir.world()?;
    let sched = cfg.schedule()?;
    let methods: Vec<RunMethod> = match method {
        Some(m) => vec![m],
        None => RunMethod::all()
            .into_iter()
            .filter(|m| dir.method_dir(*m).join("run.txt").exists())
            .collect(),
    };
    if methods.is_empty() {
        return Err(Error::MissingArtifact(out.join("<method>/run.txt")));
    }
    let thresholds = calibrate_thresholds(&world, world.seed)?;
    let mut all = Vec::new();
    for m in methods {
        let mdir = dir.method_dir(m);
        let info = RunInfo::load(&mdir.join("run.txt"))?;
        let mut eval = cfg.eval_config(&world, info.seed);
        let ckpt = match m {
            RunMethod::Beyond => {
                eval.switch_frac = Some(info.tau_frac.unwrap_or(cfg.personalize.tau_frac));
                dir.method_dir(Method::Recon.into()).join("model.ckpt")
            }
            RunMethod::Train(_) => mdir.join("model.ckpt"),
        };
        let model = DenoiserModel::load(&ckpt)?;
        let report = evaluate_method(&model, &world, &sched, &thresholds, &eval)?;
        let rows = metrics_rows(m.name(), info.w, info.seed, &report);
        write_metrics_csv(&mdir.join("metrics.csv"), &rows)?;
        all.extend(rows);
    }
    Ok(all)
}

pub const SWEEP_HEADER: &str = "w,seed,fidelity_nn,fidelity_mmd,alignment,unseen_alignment,n";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub w: f64,
    pub seed: u64,
    pub fidelity_nn: f64,
    pub fidelity_mmd: f64,
    pub alignment: f64,
    pub unseen_alignment: f64,
    pub n: usize,
}

impl SweepRow {
    fn format(&self) -> String {
        format!(
            "{:?},{},{:?},{:?},{:?},{:?},{}",
            self.w, self.seed, self.fidelity_nn, self.fidelity_mmd, self.alignment, self.unseen_alignment, self.n
        )
    }
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bad = |m: String| Error::parse(path.display().to_string(), m);
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(bad(format!("row {i}: expected 7 fields")));
        }
        let f = |j: usize| rec[j].parse::<f64>().map_err(|e| bad(format!("row {i}: {e}")));
        rows.push(SweepRow {
            w: f(0)?,
            seed: rec[1].parse().map_err(|e| bad(format!("row {i}: {e}")))?,
            fidelity_nn: f(2)?,
            fidelity_mmd: f(3)?,
            alignment: f(4)?,
            unseen_alignment: f(5)?,
            n: rec[6].parse().map_err(|e| bad(format!("row {i}: {e}")))?,
        });
    }
    Ok(rows)
}

fn write_sweep_files(out: &Path, rows: &[SweepRow], metrics: &[MetricsRow]) -> Result<()> {
    let mut text = String::from(SWEEP_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.format());
        text.push('\n');
    }
    let path = out.join("sweep.csv");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    write_metrics_csv(&out.join("sweep_metrics.csv"), metrics)
}

/// Anchor-weight sweep over `cfg.grid` x `cfg.eval.seeds`. Cells already
/// present in `sweep.csv` are not recomputed.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let dir = RunDir::new(out);
    let world = dir.world()?;
    let pretrained = dir.pretrained()?;
    let sched = cfg.schedule()?;
    let thresholds = calibrate_thresholds(&world, world.seed)?;
    let setup = SweepSetup {
        pretrained: &pretrained,
        world: &world,
        sched: &sched,
        thresholds: &thresholds,
        adapters: cfg.adapters(),
        base: cfg.personalize_config(Method::Anchored, cfg.run_seed)?,
        n_per_context: cfg.eval.n_per_context,
    };
    let sweep_path = out.join("sweep.csv");
    let mut rows = if sweep_path.exists() {
        read_sweep_csv(&sweep_path)?
    } else {
        Vec::new()
    };
    let metrics_path = out.join("sweep_metrics.csv");
    let mut metrics = if metrics_path.exists() {
        read_metrics_csv(&metrics_path)?
    } else {
        Vec::new()
    };
    let done = |rows: &[SweepRow], w: f64, seed: u64| rows.iter().any(|r| r.w == w && r.seed == seed);
    // Drop per-context rows of cells that never reached sweep.csv.
    metrics.retain(|m| done(&rows, m.w, m.seed));
    for &w in &cfg.grid {
        for &seed in &cfg.eval.seeds {
            if done(&rows, w, seed) {
                continue;
            }
            let cell = run_sweep_cell(&setup, w, seed)?;
            let r = &cell.report;
            metrics.extend(metrics_rows(Method::Anchored.name(), w, seed, r));
            rows.push(SweepRow {
                w,
                seed,
                fidelity_nn: r.fidelity_nn(),
                fidelity_mmd: r.fidelity_mmd(),
                alignment: r.alignment(),
                unseen_alignment: r.unseen_alignment(),
                n: r.n_samples(),
            });
            write_sweep_files(out, &rows, &metrics)?;
        }
    }
    // Canonical order so resumed and uninterrupted sweeps write identical files.
    let pos = |w: f64, seed: u64| {
        let gi = cfg.grid.iter().position(|g| *g == w).unwrap_or(usize::MAX);
        let si = cfg.eval.seeds.iter().position(|s| *s == seed).unwrap_or(usize::MAX);
        (gi, si)
    };
    rows.retain(|r| pos(r.w, r.seed).0 != usize::MAX && pos(r.w, r.seed).1 != usize::MAX);
    rows.sort_by_key(|r| pos(r.w, r.seed));
    metrics.retain(|m| done(&rows, m.w, m.seed));
    metrics.sort_by_key(|m| (pos(m.w, m.seed), m.score.context.index()));
    write_sweep_files(out, &rows, &metrics)?;
    let series: Vec<Series> = cfg
        .grid
        .iter()
        .map(|&w| {
            let pts = rows
                .iter()
                .filter(|r| r.w == w)
                .map(|r| (r.fidelity_nn, r.alignment))
                .collect();
            Series::new(format!("w={w}"), pts)
        })
        .collect();
    let svg = chart(
        "Anchor weight sweep",
        "fidelity_nn",
        "alignment",
        &series,
        Style::Markers,
    );
    let path = out.join("fig4.svg");
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub fidelity_nn: f64,
    pub fidelity_mmd: f64,
    pub alignment: f64,
    /// Per-metric ranks (1 = best) for fidelity_nn, fidelity_mmd, alignment.
    pub ranks: [f64; 3],
    pub rank: f64,
}

pub const COMPARISON_HEADER: &str =
    "method,fidelity_nn,fidelity_mmd,alignment,rank_fidelity_nn,rank_fidelity_mmd,rank_alignment,rank";

/// Average metrics per method, rank each metric (higher is better, ties
/// share the mean rank) and average the ranks.
pub fn comparison_table(rows: &[MetricsRow]) -> Vec<ComparisonRow> {
    let mut by_method: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        by_method.entry(r.method.as_str()).or_default().push(r);
    }
    let order: Vec<String> = RunMethod::all().iter().map(|m| m.name().to_string()).collect();
    let mut names: Vec<&str> = by_method.keys().copied().collect();
    names.sort_by_key(|n| (order.iter().position(|o| o == n).unwrap_or(usize::MAX), n.to_string()));
    let mean = |v: &[&MetricsRow], f: fn(&MetricsRow) -> f64| v.iter().map(|r| f(r)).sum::<f64>() / v.len() as f64;
    let mut table: Vec<ComparisonRow> = names
        .iter()
        .map(|n| {
            let v = &by_method[n];
            ComparisonRow {
                method: n.to_string(),
                fidelity_nn: mean(v, |r| r.score.fidelity_nn),
                fidelity_mmd: mean(v, |r| r.score.fidelity_mmd),
                alignment: mean(v, |r| r.score.alignment),
                ranks: [0.0; 3],
                rank: 0.0,
            }
        })
        .collect();
    let cols: [fn(&ComparisonRow) -> f64; 3] = [|r| r.fidelity_nn, |r| r.fidelity_mmd, |r| r.alignment];
    for (c, f) in cols.iter().enumerate() {
        let neg: Vec<f64> = table.iter().map(|r| -f(r)).collect();
        for (row, rk) in table.iter_mut().zip(ranks(&neg)) {
            row.ranks[c] = rk;
        }
    }
    for row in &mut table {
        row.rank = row.ranks.iter().sum::<f64>() / 3.0;
    }
    table
}

pub fn write_comparison_csv(path: &Path, table: &[ComparisonRow]) -> Result<()> {
    let mut s = String::from(COMPARISON_HEADER);
    s.push('\n');
    for r in table {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.method, r.fidelity_nn, r.fidelity_mmd, r.alignment, r.ranks[0], r.ranks[1], r.ranks[2], r.rank
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Seed-averaged curve per method for one dynamics field.
fn curves(
    rows: &[(String, u64, crate::dynamics::DynamicsRecord)],
    field: fn(&crate::dynamics::DynamicsRecord) -> f64,
) -> Vec<Series> {
    let mut acc: BTreeMap<(usize, String), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    let order: Vec<String> = RunMethod::all().iter().map(|m| m.name().to_string()).collect();
    for (m, _, r) in rows {
        let key = (order.iter().position(|o| o == m).unwrap_or(usize::MAX), m.clone());
        let e = acc.entry(key).or_default().entry(r.step).or_insert((0.0, 0));
        e.0 += field(r);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|((_, m), pts)| Series::new(m, pts.into_iter().map(|(s, (v, n))| (s as f64, v / n as f64)).collect()))
        .collect()
}

type Field = fn(&crate::dynamics::DynamicsRecord) -> f64;

/// Combine finished runs into `comparison.csv` and the figure analogues.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<ComparisonRow>> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut metrics = Vec::new();
    let mut dynamics = Vec::new();
    for d in run_dirs {
        if !d.is_dir() {
            return Err(Error::MissingArtifact(d.clone()));
        }
        for m in RunMethod::all() {
            let mdir = d.join(m.name());
            let mpath = mdir.join("metrics.csv");
            if mpath.exists() {
                metrics.extend(read_metrics_csv(&mpath)?);
            }
            let dpath = mdir.join("dynamics.csv");
            if dpath.exists() {
                dynamics.extend(read_dynamics_csv(&dpath)?);
            }
        }
    }
    if metrics.is_empty() {
        return Err(Error::MissingArtifact(run_dirs[0].join("<method>/metrics.csv")));
    }
    create_dir(out)?;
    let table = comparison_table(&metrics);
    write_comparison_csv(&out.join("comparison.csv"), &table)?;
    let figures: [(&str, &str, &str, Field); 4] = [
        ("fig2.svg", "Subject vs anchor prediction distance", "D2", |r| r.d2),
        ("fig6a.svg", "Reference vs subject prediction distance", "D1", |r| r.d1),
        ("fig6b.svg", "D1 - D3", "diff_b", |r| r.diff_b),
        ("fig6c.svg", "D1 - D2", "diff_c", |r| r.diff_c),
    ];
    for (file, title, label, field) in figures {
        let svg = chart(title, "step", label, &curves(&dynamics, field), Style::Lines);
        let path = out.join(file);
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    let fig5: Vec<Series> = table
        .iter()
        .enumerate()
        .map(|(i, r)| Series::new(r.method.clone(), vec![(i as f64, r.alignment)]))
        .collect();
    let svg = chart("Alignment by method", "method", "alignment", &fig5, Style::Markers);
    let path = out.join("fig5.svg");
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}
