use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use red_core::harness::pipeline;
use red_core::harness::ExperimentConfig;
use red_core::RedError;

#[derive(Parser)]
#[command(name = "red", version, about = "Residual estimation diffusion for low-dose sinograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset and its manifest.
    Generate(Common),
    /// Train the residual estimator (and toggled baselines).
    TrainRen(Common),
    /// Train the drift estimator against a trained residual estimator.
    TrainDcn(Common),
    /// Reconstruct held-out sinograms.
    Reconstruct(Common),
    /// Score reconstructions and baselines.
    Evaluate(Common),
    /// Train and score the four ablation variants per seed.
    Ablate(Common),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump every reverse-process state of the first input.
    #[arg(long)]
    trajectory: bool,
}

impl Common {
    fn load(&self) -> red_core::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<RedError>() {
        Some(RedError::MissingPrerequisite(_)) => 2,
        Some(RedError::NonFinite(_)) => 3,
        Some(RedError::ArchMismatch(_)) => 4,
        _ => 1,
    }
}

fn workers() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("RED_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("RED_WORKERS must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn list(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    workers()?;
    match cli.command {
        Command::Generate(c) => {
            let cfg = c.load()?;
            let rows = pipeline::cmd_generate(&cfg)?;
            println!("wrote {rows} pairs to {}", cfg.out_dir.join("data").display());
        }
        Command::TrainRen(c) => list(&pipeline::cmd_train_ren(&c.load()?)?),
        Command::TrainDcn(c) => list(&pipeline::cmd_train_dcn(&c.load()?)?),
        Command::Reconstruct(c) => {
            let files = pipeline::cmd_reconstruct(&c.load()?, c.trajectory)?;
            println!("wrote {} files", files.len());
        }
        Command::Evaluate(c) => {
            let ev = pipeline::cmd_evaluate(&c.load()?)?;
            for w in &ev.warnings {
                eprintln!("warning: {w}");
            }
            for r in ev.report.aggregates() {
                println!(
                    "{:<9} {:<16} psnr {:>10} ssim {:.4} nrmse {:.4}",
                    r.domain.as_str(),
                    r.method,
                    r.psnr.to_string(),
                    r.ssim,
                    r.nrmse
                );
            }
        }
        Command::Ablate(c) => {
            let ab = pipeline::cmd_ablate(&c.load()?)?;
            print!("{}", ab.to_csv());
        }
        Command::Gradcheck(c) => {
            let checks = pipeline::cmd_gradcheck(&c.load()?)?;
            print!("{}", red_core::harness::gradcheck::gradcheck_csv(&checks));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
