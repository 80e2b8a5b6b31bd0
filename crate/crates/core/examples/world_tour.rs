//! Build the default synthetic world and look around: classes, contexts, the
//! subject, and the alignment thresholds. Writes a scatter plot.
//!
//! ```text
//! cargo run --release --example world_tour [world_seed] [out.svg]
//! ```

use anchorlab::concepts::{World, WorldConfig};
use anchorlab::metrics::calibrate_thresholds;
use anchorlab::rng::seeded;
use anchorlab::svg::{chart, Series, Style};
use anchorlab::Context;

fn main() -> anchorlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("world seed"));
    let out = args.next().unwrap_or_else(|| "world_tour.svg".into());
    let world = World::build(&WorldConfig {
        seed,
        ..WorldConfig::default()
    })?;

    println!(
        "world seed {seed}: d={} K={} contexts={}",
        world.dim(),
        world.n_classes(),
        world.n_contexts()
    );
    for (k, class) in world.classes().iter().enumerate() {
        let m = class.mean();
        println!(
            "  class {k}: centroid [{:.2}, {:.2}], {} components",
            m[0],
            m[1],
            class.components().len()
        );
    }
    for j in 0..world.n_contexts() {
        let a = world.affine(Context::Ctx(j))?;
        println!("  ctx{j}: log|det A| = {:+.3}", a.log_abs_det());
    }
    let subject = world.subject()?;
    let sm = subject.distribution.mean();
    println!(
        "subject: class {} component {}, mean [{:.2}, {:.2}], {} references",
        subject.base_class,
        subject.component,
        sm[0],
        sm[1],
        subject.references.len()
    );

    let th = calibrate_thresholds(&world, world.seed)?;
    println!("alignment thresholds (log density, 5th percentile):");
    for k in 0..world.n_classes() {
        let row: Vec<String> = world
            .all_contexts()
            .iter()
            .map(|&c| format!("{:+.2}", th.get(k, c).unwrap()))
            .collect();
        println!("  class {k}: {}", row.join("  "));
    }

    let mut rng = seeded(1);
    let mut series: Vec<Series> = (0..world.n_classes())
        .map(|k| {
            let pts = (0..300)
                .map(|_| world.sample_class(k, Context::Plain, &mut rng).map(|x| (x[0], x[1])))
                .collect::<anchorlab::Result<Vec<_>>>()?;
            Ok(Series::new(format!("class {k}"), pts))
        })
        .collect::<anchorlab::Result<_>>()?;
    series.push(Series::new(
        "references",
        subject.references.iter().map(|r| (r[0], r[1])).collect(),
    ));
    std::fs::write(
        &out,
        chart("Default world (plain context)", "x0", "x1", &series, Style::Markers),
    )
    .map_err(|e| anchorlab::Error::Io {
        path: out.clone().into(),
        source: e,
    })?;
    println!("wrote {out}");
    Ok(())
}
