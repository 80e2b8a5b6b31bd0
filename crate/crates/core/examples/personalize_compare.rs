//! Pretrain once, personalise with every method under one seed, and compare
//! fidelity and alignment per context, plus the switching-guidance baseline.
//!
//! ```text
//! cargo run --release --example personalize_compare [pretrain_steps] [seed]
//! ```

use anchorlab::concepts::{World, WorldConfig};
use anchorlab::diffusion::{Schedule, ScheduleKind};
use anchorlab::metrics::{calibrate_thresholds, evaluate_method, EvalConfig, EvalReport};
use anchorlab::objectives::{Method, ObjectiveConfig};
use anchorlab::personalize::{
    build_prior_set, personalize, pretrain, snapshot, AdapterConfig, PersonalizeConfig, PretrainConfig, PRIOR_SET_SIZE,
};

fn row(name: &str, r: &EvalReport) {
    let per: Vec<String> = r
        .per_context
        .iter()
        .map(|c| format!("{}:{:.2}/{:.2}", c.context, c.fidelity_nn, c.alignment))
        .collect();
    println!(
        "{name:<12} fid_nn {:.4} fid_mmd {:.4} align {:.3} unseen {:.3}   {}",
        r.fidelity_nn(),
        r.fidelity_mmd(),
        r.alignment(),
        r.unseen_alignment(),
        per.join(" ")
    );
}

fn main() -> anchorlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(20_000, |s| s.parse().expect("pretrain steps"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let world = World::build(&WorldConfig::default())?;
    let sched = Schedule::new(200, ScheduleKind::Cosine)?;
    let base = pretrain(
        &world,
        &sched,
        &PretrainConfig {
            steps,
            ..PretrainConfig::default()
        },
    )?
    .model;
    let k = world.subject()?.base_class;
    let prior = build_prior_set(&base, k, PRIOR_SET_SIZE, &sched, 0)?;
    let thresholds = calibrate_thresholds(&world, world.seed)?;
    let eval = EvalConfig::new(&world, seed);

    println!("per context: fidelity_nn/alignment");
    let mut recon = None;
    for (method, w) in [
        (Method::Recon, 0.0),
        (Method::ReconPpl, 0.0),
        (Method::Anchored, 1.0),
        (Method::AnchoredFt, 1.0),
    ] {
        let pair = snapshot(&base, k, AdapterConfig::default(), seed)?;
        let cfg = PersonalizeConfig::new(ObjectiveConfig::new(method, w)?, seed);
        let mut model = personalize(&pair, &world, &sched, &cfg, Some(&prior), None)?.model;
        model.set_trained(true);
        row(
            method.name(),
            &evaluate_method(&model, &world, &sched, &thresholds, &eval)?,
        );
        if method == Method::Recon {
            recon = Some(model);
        }
    }

    // Inference-only baseline: the recon model, sampled with the class
    // condition for the first 60% of steps.
    let switched = EvalConfig {
        switch_frac: Some(0.6),
        ..eval
    };
    let recon = recon.expect("recon ran first");
    row(
        "beyond",
        &evaluate_method(&recon, &world, &sched, &thresholds, &switched)?,
    );
    Ok(())
}
