use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hsiclab::harness::experiment::default_checkpoints;
use hsiclab::harness::metrics::{final_test_accuracy, mean_std};
use hsiclab::harness::{emit_metrics, run_gradcheck, run_sweep, run_trials, ExperimentConfig, Task};

/// Experiments for HSIC-bottleneck learning in LIF rate networks.
#[derive(Parser)]
#[command(name = "hsiclab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate as configured; metrics go to the configured CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Final test accuracy over a grid of effective batch sizes and epoch counts.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        batch_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        epochs: Vec<usize>,
        /// CSV with one row per grid cell.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Reservoir learning the analytic signal of a random task.
    ReservoirTest {
        #[arg(long)]
        config: PathBuf,
    },
    /// Estimator, gradient and reduction checks against reference computations.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

type CliResult = Result<bool, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, output } => run(&config, output),
        Command::Sweep {
            config,
            batch_sizes,
            epochs,
            output,
        } => sweep(&config, &batch_sizes, &epochs, output.as_deref()),
        Command::ReservoirTest { config } => reservoir_test(&config),
        Command::Gradcheck { seed } => gradcheck(seed),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(config: &Path, output: Option<PathBuf>) -> CliResult {
    let cfg = ExperimentConfig::from_path(config)?;
    let trials = run_trials(&cfg, &default_checkpoints(&cfg))?;
    let records: Vec<_> = trials.iter().flat_map(|t| t.records.iter().cloned()).collect();
    if let Some(path) = output.or_else(|| cfg.output.clone()) {
        emit_metrics(&records, &path)?;
        println!("metrics written to {}", path.display());
    }
    if cfg.task == Task::ReservoirSignal {
        for (i, t) in trials.iter().enumerate() {
            println!("trial {i}: test normalized MSE {:.4}", t.signal_nmse.unwrap_or(f64::NAN));
        }
        return Ok(true);
    }
    let finals = final_test_accuracy(&records);
    for (i, (t, acc)) in trials.iter().zip(&finals).enumerate() {
        let ratio = t.weight_ratios.last().map(|r| format!(", weight ratio {:.3}", r.1)).unwrap_or_default();
        println!("trial {i}: test accuracy {acc:.4}{ratio}");
    }
    let (m, s) = mean_std(&finals);
    println!("mean test accuracy {m:.4} +- {s:.4} over {} trials", finals.len());
    Ok(true)
}

fn sweep(config: &Path, n_effs: &[usize], epochs: &[usize], output: Option<&Path>) -> CliResult {
    let cfg = ExperimentConfig::from_path(config)?;
    let r = run_sweep(&cfg, n_effs, epochs)?;
    let mut rows = vec!["n_eff,epochs,accuracy,normalized".to_string()];
    println!("{:>6} {:>7} {:>9} {:>10}", "n_eff", "epochs", "accuracy", "normalized");
    for (i, n) in r.n_effs.iter().enumerate() {
        for (j, e) in r.epochs.iter().enumerate() {
            println!("{n:>6} {e:>7} {:>9.4} {:>10.4}", r.accuracy[i][j], r.normalized[i][j]);
            rows.push(format!("{n},{e},{},{}", r.accuracy[i][j], r.normalized[i][j]));
        }
    }
    if let Some(path) = output {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
        writeln!(f, "{}", rows.join("\n")).map_err(|e| format!("{}: {e}", path.display()))?;
        println!("grid written to {}", path.display());
    }
    Ok(true)
}

fn reservoir_test(config: &Path) -> CliResult {
    let cfg = ExperimentConfig::from_path(config)?;
    if cfg.task != Task::ReservoirSignal {
        return Err(format!("{}: reservoir-test needs task = \"reservoir_signal\"", config.display()).into());
    }
    let trials = run_trials(&cfg, &default_checkpoints(&cfg))?;
    let nmse: Vec<f64> = trials.iter().map(|t| t.signal_nmse.unwrap_or(f64::NAN)).collect();
    for (i, v) in nmse.iter().enumerate() {
        println!("trial {i}: test normalized MSE {v:.4}");
    }
    let (m, s) = mean_std(&nmse);
    println!("mean {m:.4} +- {s:.4}");
    Ok(true)
}

fn gradcheck(seed: u64) -> CliResult {
    let r = run_gradcheck(seed)?;
    for (name, c) in [
        ("estimator", r.estimator),
        ("gradient", r.gradient),
        ("reduction", r.reduction),
    ] {
        let verdict = if c.passed() { "ok" } else { "FAILED" };
        println!(
            "{name:<10} {verdict:<6} max error {:.3e} (tolerance {:.0e}, {} instances)",
            c.max_error, c.tolerance, c.instances
        );
    }
    Ok(r.passed())
}
