//! Anchor-weight sweep: alignment should rise and fidelity fall with `w`.
//!
//! ```text
//! cargo run --release --example w_sweep [pretrain_steps] [n_seeds]
//! ```

use anchorlab::concepts::{World, WorldConfig};
use anchorlab::diffusion::{Schedule, ScheduleKind};
use anchorlab::metrics::calibrate_thresholds;
use anchorlab::objectives::ObjectiveConfig;
use anchorlab::personalize::{
    pretrain, run_ablation_wsweep, AdapterConfig, PersonalizeConfig, PretrainConfig, SweepSetup, DEFAULT_GRID,
};
use anchorlab::stats::{mean, spearman};

fn main() -> anchorlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(20_000, |s| s.parse().expect("pretrain steps"));
    let n_seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seed count"));
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
    let thresholds = calibrate_thresholds(&world, world.seed)?;
    let setup = SweepSetup {
        pretrained: &base,
        world: &world,
        sched: &sched,
        thresholds: &thresholds,
        adapters: AdapterConfig::default(),
        base: PersonalizeConfig::new(ObjectiveConfig::recon(), 0),
        n_per_context: 256,
    };
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let cells = run_ablation_wsweep(&setup, &DEFAULT_GRID, &seeds)?;

    let (mut align, mut fid) = (Vec::new(), Vec::new());
    println!("{:>5} {:>9} {:>7}", "w", "fid_nn", "align");
    for w in DEFAULT_GRID {
        let at: Vec<_> = cells.iter().filter(|c| c.w == w).collect();
        let a = mean(&at.iter().map(|c| c.report.alignment()).collect::<Vec<_>>());
        let f = mean(&at.iter().map(|c| c.report.fidelity_nn()).collect::<Vec<_>>());
        println!("{w:>5} {f:>9.4} {a:>7.3}");
        align.push(a);
        fid.push(f);
    }
    println!(
        "spearman(w, alignment) = {:+.2}, spearman(w, fidelity_nn) = {:+.2}",
        spearman(&DEFAULT_GRID, &align),
        spearman(&DEFAULT_GRID, &fid)
    );
    Ok(())
}
