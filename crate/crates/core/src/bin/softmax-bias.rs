use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use softmax_bias::harness::{cmd_ablate, cmd_gen, cmd_scatter, cmd_sensitivity, ExperimentConfig};
use softmax_bias::Error;

#[derive(Parser)]
#[command(
    name = "softmax-bias",
    version,
    about = "Softmax quantization bias experiments on synthetic attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic calibration set as QBT1 tensors plus a manifest
    Gen(Overrides),
    /// Quantize one attention activation at a time and report output SQNR
    Sensitivity(Overrides),
    /// Compare softmax bias correction granularities
    Ablate(Overrides),
    /// Expected quantized softmax sum against SQNR over a logit_std sweep
    Scatter(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// JSON experiment config; flags take precedence over its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    bits: Option<u8>,
    /// Number of seeds to repeat each measurement over
    #[arg(long)]
    seeds: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(bits) = self.bits {
            cfg.bits = bits;
        }
        if let Some(seeds) = self.seeds {
            cfg.seeds = seeds;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen(o) => {
            let cfg = o.resolve()?;
            let m = cmd_gen(&cfg)?;
            println!(
                "wrote {} samples of shape {:?} to {}",
                m.n_samples,
                m.shape,
                cfg.out_dir.join("calibration").display()
            );
        }
        Command::Sensitivity(o) => {
            let cfg = o.resolve()?;
            let rows = cmd_sensitivity(&cfg)?;
            let mut keys: Vec<_> = rows.iter().map(|r| (r.bitwidth, r.quant_point)).collect();
            keys.dedup();
            for (bits, point) in keys {
                let m = mean(
                    rows.iter()
                        .filter(|r| r.bitwidth == bits && r.quant_point == point)
                        .map(|r| r.sqnr_db),
                );
                println!("{bits:>2}-bit {point:<12} mean SQNR {m:8.3} dB");
            }
        }
        Command::Ablate(o) => {
            let cfg = o.resolve()?;
            let rows = cmd_ablate(&cfg)?;
            let mut kinds: Vec<_> = rows.iter().map(|r| r.correction).collect();
            kinds.dedup();
            for kind in kinds {
                let m = mean(rows.iter().filter(|r| r.correction == kind).map(|r| r.sqnr_db));
                println!("{:<14} mean SQNR {m:8.3} dB", kind.name());
            }
        }
        Command::Scatter(o) => {
            let cfg = o.resolve()?;
            let rows = cmd_scatter(&cfg)?;
            for r in &rows {
                println!(
                    "logit_std {:6.3}  expected_sum {:.4}  SQNR {:8.3} dB",
                    r.logit_std, r.expected_sum, r.sqnr_db
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
