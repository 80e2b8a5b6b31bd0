use std::path::Path;
use std::sync::OnceLock;

use anchorlab::concepts::{World, WorldConfig};
use anchorlab::diffusion::{Schedule, ScheduleKind};
use anchorlab::dynamics::{read_dynamics_csv, ProbeSet};
use anchorlab::lab::{self, read_sweep_csv, RunConfig, RunDir, RunInfo, RunMethod};
use anchorlab::metrics::{calibrate_thresholds, AlignmentThresholds};
use anchorlab::model::{DenoiserModel, TrainScope};
use anchorlab::objectives::{Method, ObjectiveConfig};
use anchorlab::personalize::{
    build_prior_set, personalize, pretrain, run_ablation_wsweep, snapshot, AdapterConfig, PersonalizeConfig,
    PretrainConfig, PriorSet, SweepSetup,
};
use anchorlab::Error;

const SMALL: &str = "pretrain.steps = 1500\npersonalize.steps = 60\npersonalize.probe_every = 20\n\
                     eval.n_per_context = 32\neval.seeds = 0, 1\nsweep.grid = 0, 0.5, 1\npersonalize.ppl_m = 40\n";

struct Base {
    world: World,
    sched: Schedule,
    model: DenoiserModel,
    prior: PriorSet,
    thresholds: AlignmentThresholds,
}

fn base() -> &'static Base {
    static CELL: OnceLock<Base> = OnceLock::new();
    CELL.get_or_init(|| {
        let world = World::build(&WorldConfig::default()).unwrap();
        let sched = Schedule::new(200, ScheduleKind::Cosine).unwrap();
        let cfg = PretrainConfig {
            steps: 1500,
            ..PretrainConfig::default()
        };
        let model = pretrain(&world, &sched, &cfg).unwrap().model;
        let k = world.subject().unwrap().base_class;
        let prior = build_prior_set(&model, k, 40, &sched, 0).unwrap();
        let thresholds = calibrate_thresholds(&world, world.seed).unwrap();
        Base {
            world,
            sched,
            model,
            prior,
            thresholds,
        }
    })
}

fn small_run(method: Method, w: f64, seed: u64, steps: usize) -> anchorlab::personalize::Personalized {
    let b = base();
    let k = b.world.subject().unwrap().base_class;
    let pair = snapshot(&b.model, k, AdapterConfig::default(), seed).unwrap();
    let probes = ProbeSet::new(&b.world, &b.sched, 64, 8, seed).unwrap();
    let mut cfg = PersonalizeConfig::new(ObjectiveConfig::new(method, w).unwrap(), seed);
    cfg.steps = steps;
    cfg.probe_every = 10;
    let out = personalize(&pair, &b.world, &b.sched, &cfg, Some(&b.prior), Some(&probes)).unwrap();
    assert_eq!(
        pair.theta_prime().checksum(),
        b.model.checksum(),
        "anchor model changed"
    );
    out
}

#[test]
fn personalization_only_moves_adapters_and_subject_row() {
    let b = base();
    let k = b.world.subject().unwrap().base_class;
    let mut before = snapshot(&b.model, k, AdapterConfig::default(), 2).unwrap().theta;
    let mut after = small_run(Method::Anchored, 1.0, 2, 30).model;
    assert!(after.is_finite());
    let values = |m: &mut DenoiserModel, scope| -> Vec<Vec<f64>> {
        m.trainable_mut(scope)
            .into_iter()
            .map(|p| p.values().to_vec())
            .collect()
    };
    assert_eq!(
        values(&mut before, TrainScope::Full),
        values(&mut after, TrainScope::Full)
    );
    let (a0, a1) = (
        values(&mut before, TrainScope::Adapter),
        values(&mut after, TrainScope::Adapter),
    );
    assert_eq!(a0.len(), a1.len());
    assert!(
        a0.iter().zip(&a1).all(|(x, y)| x != y),
        "an adapter tensor did not train"
    );
}

#[test]
fn probes_cover_schedule_and_start_at_zero_drift() {
    for method in Method::ALL {
        let out = small_run(method, 0.5, 1, 25);
        let steps: Vec<usize> = out.dynamics.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25], "{method:?}");
        let r0 = out.dynamics[0];
        assert!(r0.d2.abs() <= 1e-12 && r0.diff_b.abs() <= 1e-12);
        assert_eq!(out.losses.len(), 25);
        assert!(out.losses.iter().all(|l| l.total.is_finite()));
    }
}

#[test]
fn anchored_with_zero_weight_is_recon() {
    let a = small_run(Method::Recon, 0.0, 5, 40);
    let b = small_run(Method::Anchored, 0.0, 5, 40);
    assert_eq!(a.model, b.model);
    assert_eq!(a.model.to_checkpoint(), b.model.to_checkpoint());
}

#[test]
fn same_seed_same_model_other_seed_differs() {
    let a = small_run(Method::ReconPpl, 0.0, 8, 20);
    let b = small_run(Method::ReconPpl, 0.0, 8, 20);
    let c = small_run(Method::ReconPpl, 0.0, 9, 20);
    assert_eq!(a.model.checksum(), b.model.checksum());
    assert_ne!(a.model.checksum(), c.model.checksum());
}

#[test]
fn prior_preservation_requires_a_prior_set() {
    let b = base();
    let pair = snapshot(&b.model, 0, AdapterConfig::default(), 0).unwrap();
    let cfg = PersonalizeConfig::new(ObjectiveConfig::new(Method::ReconPpl, 0.0).unwrap(), 0);
    let err = personalize(&pair, &b.world, &b.sched, &cfg, None, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn prior_set_round_trips_through_csv() {
    let b = base();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prior.csv");
    b.prior.save(&path).unwrap();
    let back = PriorSet::load(&path, b.prior.seed).unwrap();
    assert_eq!(back, b.prior);
    assert_eq!(b.prior.samples.len(), 40);
}

#[test]
fn sweep_cells_do_not_depend_on_grid_order() {
    let b = base();
    let mut base_cfg = PersonalizeConfig::new(ObjectiveConfig::recon(), 0);
    base_cfg.steps = 20;
    let setup = SweepSetup {
        pretrained: &b.model,
        world: &b.world,
        sched: &b.sched,
        thresholds: &b.thresholds,
        adapters: AdapterConfig::default(),
        base: base_cfg,
        n_per_context: 16,
    };
    let fwd = run_ablation_wsweep(&setup, &[0.0, 1.0], &[0, 1]).unwrap();
    let rev = run_ablation_wsweep(&setup, &[1.0, 0.0], &[1, 0]).unwrap();
    assert_eq!(fwd.len(), 4);
    for cell in &fwd {
        let twin = rev.iter().find(|c| c.w == cell.w && c.seed == cell.seed).unwrap();
        assert_eq!(cell.report, twin.report);
    }
}

fn lab_run(root: &Path) -> RunConfig {
    let cfg = RunConfig::parse(SMALL).unwrap();
    lab::cmd_pretrain(&cfg, root).unwrap();
    cfg
}

fn personalize_as(cfg: &RunConfig, root: &Path, method: &str, w: Option<f64>) {
    let mut c = cfg.clone();
    c.personalize.method = method.parse().unwrap();
    c.personalize.w = w;
    lab::cmd_personalize(&c, root).unwrap();
}

#[test]
fn lab_commands_write_expected_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = lab_run(root);
    let dir = RunDir::new(root);
    for p in [
        dir.world_path(),
        dir.pretrained_path(),
        dir.prior_path(),
        root.join("loss.csv"),
    ] {
        assert!(p.exists(), "{}", p.display());
    }

    // A zero-weight anchored run reproduces recon byte for byte.
    personalize_as(&cfg, root, "recon", None);
    let recon = std::fs::read(root.join("recon/model.ckpt")).unwrap();
    personalize_as(&cfg, root, "anchored", Some(0.0));
    assert_eq!(std::fs::read(root.join("anchored/model.ckpt")).unwrap(), recon);

    personalize_as(&cfg, root, "anchored", Some(1.0));
    assert_ne!(std::fs::read(root.join("anchored/model.ckpt")).unwrap(), recon);
    let info = RunInfo::load(&root.join("anchored/run.txt")).unwrap();
    assert_eq!(
        (info.method, info.w, info.seed),
        (RunMethod::Train(Method::Anchored), 1.0, 0)
    );
    let dyn_rows = read_dynamics_csv(&root.join("anchored/dynamics.csv")).unwrap();
    assert_eq!(
        dyn_rows.iter().map(|r| r.2.step).collect::<Vec<_>>(),
        vec![0, 20, 40, 60]
    );

    personalize_as(&cfg, root, "beyond", None);
    let rows = lab::cmd_evaluate(&cfg, root, None).unwrap();
    // recon, anchored and beyond, each over PLAIN plus three contexts.
    assert_eq!(rows.len(), 3 * 4);

    let table = lab::cmd_report(&[root.to_path_buf()], &root.join("report")).unwrap();
    assert_eq!(table.len(), 3);
    let n = table.len() as f64;
    for row in &table {
        assert!(row.ranks.iter().all(|r| (1.0..=n).contains(r)));
        assert!((row.rank - row.ranks.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }
    // Per-metric ranks are a permutation of 1..=n up to ties.
    for m in 0..3 {
        let total: f64 = table.iter().map(|r| r.ranks[m]).sum();
        assert!((total - n * (n + 1.0) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn sweep_resumes_to_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = lab_run(root);
    let rows = lab::cmd_sweep(&cfg, root).unwrap();
    assert_eq!(rows.len(), 3 * 2);
    assert_eq!(read_sweep_csv(&root.join("sweep.csv")).unwrap(), rows);
    let full_sweep = std::fs::read(root.join("sweep.csv")).unwrap();
    let full_metrics = std::fs::read(root.join("sweep_metrics.csv")).unwrap();

    // Drop the last two cells as if the sweep had been interrupted.
    let text = String::from_utf8(full_sweep.clone()).unwrap();
    let kept: Vec<&str> = text.lines().take(1 + 4).collect();
    std::fs::write(root.join("sweep.csv"), kept.join("\n") + "\n").unwrap();
    let resumed = lab::cmd_sweep(&cfg, root).unwrap();
    assert_eq!(resumed, rows);
    assert_eq!(std::fs::read(root.join("sweep.csv")).unwrap(), full_sweep);
    assert_eq!(std::fs::read(root.join("sweep_metrics.csv")).unwrap(), full_metrics);
    assert!(root.join("fig4.svg").exists());
}

#[test]
fn missing_artifacts_are_reported_as_such() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(SMALL).unwrap();
    let err = lab::cmd_personalize(&cfg, tmp.path()).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)), "{err}");
    assert_eq!(lab::exit_code(&err), 4);
    let err = lab::cmd_evaluate(&cfg, tmp.path(), None).unwrap_err();
    assert_eq!(lab::exit_code(&err), 4);
}
