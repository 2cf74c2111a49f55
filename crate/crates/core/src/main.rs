use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use attestfl::config::ScenarioConfig;
use attestfl::defense::snapshot::{rescore, Snapshot};
use attestfl::experiment;
use attestfl::Error;

#[derive(Parser)]
#[command(name = "attestfl", version, about = "Federated learning poisoning and attestation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write CSV results.
    Run {
        config: PathBuf,
        /// Comma-separated subset of baseline,attack,defended.
        #[arg(long, default_value = "baseline,attack,defended")]
        arms: String,
        /// Output directory; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario file and print its normalised form.
    Validate { config: PathBuf },
    /// Re-run the detectors over a saved history snapshot.
    Rescore {
        snapshot: PathBuf,
        /// Scenario whose `[defense]` section supplies the thresholds.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the verdicts here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig, Failure> {
    ScenarioConfig::load(path).map_err(Failure::Config)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, arms, out } => {
            let cfg = load_config(&config)?;
            let arms = experiment::parse_arms(&arms).map_err(Failure::Config)?;
            print!("{}", cfg.to_ini());
            let report = experiment::run_experiment(&cfg, &arms)?;
            println!();
            for a in &report.summary.arms {
                let det = a.detection;
                println!(
                    "{:<9} final_acc={:.4} precision={} recall={} fpr={}",
                    a.arm.as_str(),
                    a.final_accuracy,
                    fmt_opt(det.and_then(|d| d.precision())),
                    fmt_opt(det.and_then(|d| d.recall())),
                    fmt_opt(det.and_then(|d| d.false_positive_rate())),
                );
            }
            let s = &report.summary;
            if s.uplift_points.is_some() {
                println!(
                    "uplift: {} points ({} relative)",
                    fmt_opt(s.uplift_points),
                    fmt_opt(s.uplift_relative)
                );
            }
            if let Some(f) = s.overhead_factor {
                println!("overhead factor: {f:.3}");
            }
            if let Some(dir) = out.or(cfg.output_dir.clone()) {
                experiment::emit_csv(&report, &dir)?;
                println!("wrote {}", dir.display());
            }
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            print!("{}", cfg.to_ini());
            Ok(())
        }
        Command::Rescore { snapshot, config, out } => {
            let defense = match &config {
                Some(path) => load_config(path)?.defense.unwrap_or_default(),
                None => Default::default(),
            };
            let snap = Snapshot::read(&snapshot)?;
            let verdicts = rescore(&snap, &defense)?;
            let mut text = String::from("round,worker_id,delta_rate,a1,a2,a3,accepted\n");
            for v in &verdicts {
                let _ = writeln!(
                    text,
                    "{},{},{},{},{},{},{}",
                    v.round,
                    v.worker_id,
                    v.delta_rate.map_or_else(|| "NA".into(), |x| x.to_string()),
                    v.verdict.a1,
                    v.verdict.a2,
                    v.verdict.a3,
                    v.verdict.reliable
                );
            }
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| Failure::Runtime(Error::Io { path, source: e }))?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
