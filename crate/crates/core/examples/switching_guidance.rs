//! Sweep the switching point of the inference-only baseline: superclass
//! condition for the first `tau` of the steps, subject afterwards.
//!
//! ```text
//! cargo run --release --example switching_guidance [pretrain_steps]
//! ```

use anchorlab::concepts::{World, WorldConfig};
use anchorlab::diffusion::{Schedule, ScheduleKind};
use anchorlab::metrics::{calibrate_thresholds, evaluate_method, EvalConfig};
use anchorlab::objectives::ObjectiveConfig;
use anchorlab::personalize::{personalize, pretrain, snapshot, AdapterConfig, PersonalizeConfig, PretrainConfig};

fn main() -> anchorlab::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .map_or(20_000, |s| s.parse().expect("pretrain steps"));
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
    let pair = snapshot(&base, k, AdapterConfig::default(), 0)?;
    let cfg = PersonalizeConfig::new(ObjectiveConfig::recon(), 0);
    let mut model = personalize(&pair, &world, &sched, &cfg, None, None)?.model;
    model.set_trained(true);
    let thresholds = calibrate_thresholds(&world, world.seed)?;

    println!("{:>5} {:>9} {:>9} {:>7}", "tau", "fid_nn", "fid_mmd", "align");
    let plain = evaluate_method(&model, &world, &sched, &thresholds, &EvalConfig::new(&world, 0))?;
    println!(
        "{:>5} {:>9.4} {:>9.4} {:>7.3}",
        "none",
        plain.fidelity_nn(),
        plain.fidelity_mmd(),
        plain.alignment()
    );
    for tau in [0.2, 0.4, 0.6, 0.8, 0.95] {
        let eval = EvalConfig {
            switch_frac: Some(tau),
            ..EvalConfig::new(&world, 0)
        };
        let r = evaluate_method(&model, &world, &sched, &thresholds, &eval)?;
        println!(
            "{tau:>5} {:>9.4} {:>9.4} {:>7.3}",
            r.fidelity_nn(),
            r.fidelity_mmd(),
            r.alignment()
        );
    }
    Ok(())
}
