//! The file-based workflow the `anchorlab` binary drives, run in-process:
//! pretrain, personalise every method, evaluate, sweep and report.
//!
//! ```text
//! cargo run --release --example lab_pipeline [run_dir]
//! ```

use std::path::PathBuf;

use anchorlab::lab::{self, RunConfig};

// A reduced configuration so the whole pipeline finishes in well under a minute.
const CONFIG: &str = "
pretrain.steps = 3000
personalize.steps = 300
eval.n_per_context = 128
eval.seeds = 0, 1
sweep.grid = 0, 0.5, 1
";

fn main() -> anchorlab::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "lab_run".into()));
    let cfg = RunConfig::parse(CONFIG)?;
    lab::cmd_pretrain(&cfg, &root)?;
    for method in ["recon", "recon_ppl", "anchored", "anchored_ft", "beyond"] {
        let mut c = cfg.clone();
        c.personalize.method = method.parse()?;
        lab::cmd_personalize(&c, &root)?;
    }
    lab::cmd_evaluate(&cfg, &root, None)?;
    let sweep = lab::cmd_sweep(&cfg, &root)?;
    println!("sweep: {} cells", sweep.len());
    let table = lab::cmd_report(std::slice::from_ref(&root), &root.join("report"))?;
    println!(
        "{:<12} {:>8} {:>8} {:>7} {:>5}",
        "method", "fid_nn", "fid_mmd", "align", "rank"
    );
    for r in table {
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>7.3} {:>5.2}",
            r.method, r.fidelity_nn, r.fidelity_mmd, r.alignment, r.rank
        );
    }
    println!("artifacts in {}", root.display());
    Ok(())
}
