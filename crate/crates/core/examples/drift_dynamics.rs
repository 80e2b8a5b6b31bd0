//! Track how far each method's subject prediction drifts from the frozen
//! anchor (D2) and from the true noise (D1) during personalisation, and plot
//! the curves.
//!
//! ```text
//! cargo run --release --example drift_dynamics [pretrain_steps] [out_dir]
//! ```

use std::path::PathBuf;

use anchorlab::concepts::{World, WorldConfig};
use anchorlab::diffusion::{Schedule, ScheduleKind};
use anchorlab::dynamics::{compare_drift, final_window_mean, DynamicsRecord, ProbeSet};
use anchorlab::objectives::{Method, ObjectiveConfig};
use anchorlab::personalize::{
    build_prior_set, personalize, pretrain, snapshot, AdapterConfig, PersonalizeConfig, PretrainConfig, PRIOR_SET_SIZE,
};
use anchorlab::svg::{chart, Series, Style};

fn main() -> anchorlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(20_000, |s| s.parse().expect("pretrain steps"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| ".".into()));
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
    let probes = ProbeSet::new(&world, &sched, ProbeSet::DEFAULT_SIZE, ProbeSet::DEFAULT_BINS, 0)?;

    let mut runs = Vec::new();
    for method in Method::ALL {
        let pair = snapshot(&base, k, AdapterConfig::default(), 0)?;
        let cfg = PersonalizeConfig::new(ObjectiveConfig::new(method, 1.0)?, 0);
        let out = personalize(&pair, &world, &sched, &cfg, Some(&prior), Some(&probes))?;
        let d1 = final_window_mean(&out.dynamics, |r| r.d1) / out.dynamics[0].d1;
        println!("{:<12} final D1 / initial D1 = {d1:.3}", method.name());
        runs.push((method.name().to_string(), out.dynamics));
    }
    println!("\nfinal-window D2, least drift first:");
    for (name, d2) in compare_drift(&runs)?.ranking {
        println!("  {name:<12} {d2:.4}");
    }

    let curves = |f: fn(&DynamicsRecord) -> f64| -> Vec<Series> {
        runs.iter()
            .map(|(m, recs)| Series::new(m.clone(), recs.iter().map(|r| (r.step as f64, f(r))).collect()))
            .collect()
    };
    for (file, label, curves) in [
        ("drift_d2.svg", "D2", curves(|r| r.d2)),
        ("drift_d1.svg", "D1", curves(|r| r.d1)),
    ] {
        let path = out.join(file);
        std::fs::write(&path, chart(label, "step", label, &curves, Style::Lines)).map_err(|e| {
            anchorlab::Error::Io {
                path: path.clone(),
                source: e,
            }
        })?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
