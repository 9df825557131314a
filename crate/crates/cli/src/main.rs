use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use llcprobe_core::experiment::{run, write_outputs, Command, ExperimentConfig};
use llcprobe_core::pruning::{Algorithm, Scope};

/// Simulated last-level-cache Prime+Probe experiments.
#[derive(Parser)]
#[command(name = "llcprobe", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Time the pruning algorithms on fresh candidate sets.
    PruneBench,
    /// Build eviction sets for a whole page offset or the whole system.
    Bulk,
    /// Covert-channel detection rate per monitoring strategy and interval.
    CovertSweep,
    /// Power spectra of a victim set and an idle set.
    PsdDemo,
    /// Search a set of eviction sets for the victim's.
    Scan,
    /// Full attack: build, scan, then recover nonce bits.
    EndToEnd,
}

impl Cmd {
    fn command(self) -> Command {
        match self {
            Cmd::PruneBench => Command::PruneBench,
            Cmd::Bulk => Command::Bulk,
            Cmd::CovertSweep => Command::CovertSweep,
            Cmd::PsdDemo => Command::PsdDemo,
            Cmd::Scan => Command::Scan,
            Cmd::EndToEnd => Command::EndToEnd,
        }
    }
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Background accesses per set per millisecond.
    #[arg(long, global = true)]
    noise_rate: Option<f64>,
    /// gt, gtop, ps, psop, bins or song.
    #[arg(long, global = true)]
    algorithm: Option<Algorithm>,
    /// single-set, page-offset or whole-sys.
    #[arg(long, global = true)]
    scope: Option<Scope>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> llcprobe_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.noise_rate {
            cfg.noise_rate = r;
            cfg.noise_rates.clear();
        }
        if let Some(a) = self.algorithm {
            cfg.algorithm = Some(a);
        }
        if let Some(s) = self.scope {
            cfg.scope = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.common.resolve().and_then(|cfg| {
        let outputs = run(cli.cmd.command(), &cfg)?;
        write_outputs(&cfg.out_dir, &outputs)
    });
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("llcprobe: {e}");
            ExitCode::FAILURE
        }
    }
}
