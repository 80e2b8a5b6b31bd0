use std::path::PathBuf;
use std::process::ExitCode;

use anchorlab::lab::{self, Overrides, RunConfig, RunMethod};
use anchorlab::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "anchorlab", version, about = "Desk-scale diffusion personalisation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`section.key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the world, pretrain the base model and draw the prior set.
    Pretrain(Common),
    /// Personalise the pretrained model with one method.
    Personalize {
        #[command(flatten)]
        common: Common,
        /// recon | recon_ppl | anchored | anchored_ft | beyond
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        w: Option<f64>,
        /// Fraction of sampling steps spent on the superclass (beyond only).
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Anchor-weight sweep over the configured grid and seeds.
    Sweep(Common),
    /// Score personalised models and write per-method metrics.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Merge finished runs into comparison.csv and figure SVGs.
    Report {
        /// Run directories to merge.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common, overrides: Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    Overrides {
        seed: common.seed,
        ..overrides
    }
    .apply(&mut cfg)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => lab::cmd_pretrain(&load(&c, Overrides::default())?, &c.out),
        Command::Personalize { common, method, w, tau } => {
            let cfg = load(
                &common,
                Overrides {
                    method,
                    w,
                    tau,
                    seed: None,
                },
            )?;
            lab::cmd_personalize(&cfg, &common.out)
        }
        Command::Sweep(c) => lab::cmd_sweep(&load(&c, Overrides::default())?, &c.out).map(|_| ()),
        Command::Evaluate { common, method, tau } => {
            let method = method.map(|m| m.parse::<RunMethod>()).transpose()?;
            let cfg = load(
                &common,
                Overrides {
                    tau,
                    ..Overrides::default()
                },
            )?;
            lab::cmd_evaluate(&cfg, &common.out, method).map(|_| ())
        }
        Command::Report { runs, out } => lab::cmd_report(&runs, &out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("anchorlab: {e}");
            ExitCode::from(lab::exit_code(&e) as u8)
        }
    }
}
