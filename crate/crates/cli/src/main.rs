use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use echo_cli::config::parse_seeds;
use echo_cli::{cmd_calibrate, cmd_compare, cmd_run, ConfigError, Overrides};

#[derive(Parser)]
#[command(
    name = "echo",
    version,
    about = "Adaptive teacher-guided sampling on toy diffusion worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone)]
struct Seeds(Vec<u64>);

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed list such as `0..20` or `1,4,9`.
    #[arg(long, value_parser = |s: &str| parse_seeds(s).map(Seeds))]
    seeds: Option<Seeds>,
    /// Zero every noise stream.
    #[arg(long)]
    deterministic: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seeds: self.seeds.as_ref().map(|s| s.0.clone()),
            deterministic: self.deterministic,
            jobs: self.jobs,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured kind over every seed.
    Run(RunArgs),
    /// Tabulate several run directories against each other.
    Compare {
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "comparison")]
        out: PathBuf,
    },
    /// Suggest delta1/delta2 from student-motion loss percentiles.
    Calibrate(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(&args.config, &args.overrides()).map(|report| {
            for s in &report.summary {
                eprintln!(
                    "{:<15} runs {:>3}  failed {}  loss {}  fidelity {}  teacher nfe {}",
                    s.kind,
                    s.runs,
                    s.failed,
                    fmt(s.final_motion_loss_mean),
                    fmt(s.motion_fidelity_mean),
                    s.teacher_nfe_total
                );
            }
            eprintln!("wrote {}", report.out.display());
            if report.failed() > 0 {
                eprintln!("{} runs aborted; see status column of metrics.csv", report.failed());
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }),
        Command::Compare { dirs, out } => cmd_compare(dirs, out).map(|()| {
            eprintln!("wrote {}", out.display());
            ExitCode::SUCCESS
        }),
        Command::Calibrate(args) => cmd_calibrate(&args.config, &args.overrides()).map(|(path, cal)| {
            eprintln!(
                "delta1 = {} (p{}), delta2 = {} (p{}) over {} gated steps",
                cal.delta1,
                cal.delta1_percentile * 100.0,
                cal.delta2,
                cal.delta2_percentile * 100.0,
                cal.gated_losses
            );
            eprintln!("wrote {}", path.display());
            ExitCode::SUCCESS
        }),
    };
    result.unwrap_or_else(|e| {
        if let Some(c) = e.downcast_ref::<ConfigError>() {
            eprintln!("invalid config: {c}");
            ExitCode::from(2)
        } else {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    })
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}
