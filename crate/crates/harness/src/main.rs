use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ligs_core::config::RunConfig;
use ligs_harness::analysis::{aggregate_heatmaps, validate_metrics};
use ligs_harness::{compare_runs, run_experiment, run_theory_suite, ExperimentSpec, HarnessError, SuiteOptions};

#[derive(Parser)]
#[command(name = "ligs", version, about = "Train, verify and compare intrinsic-reward MARL runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seeded training experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Overrides total_env_steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Write a JSON-lines trace of the first environment copy.
        #[arg(long)]
        trace: bool,
    },
    /// Run the operator, invariance, approximation and telescoping suites.
    Verify {
        /// Tolerance override applied to every check except the contraction slack.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trajectory length per game for the linear-approximation check.
        #[arg(long)]
        sa_steps: Option<u64>,
        /// Extra JSON game fixtures to check.
        #[arg(long = "fixture")]
        fixtures: Vec<PathBuf>,
    },
    /// Compare two algorithms by seed-median final-window metric.
    Compare {
        /// Experiment directory holding one subdirectory per algorithm.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long, default_value = "ret_ext")]
        metric: String,
    },
    /// Sum and print the switch-activation heatmaps of a run directory.
    Heatmap {
        #[arg(long)]
        run: PathBuf,
    },
    /// Check metrics files for header, field and step-order errors.
    ValidateMetrics {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            steps,
            trace,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.total_env_steps = s;
            }
            cfg.validate()?;
            let mut spec = ExperimentSpec::new(cfg, out);
            spec.trace = trace;
            let summary = run_experiment(&spec)?;
            println!(
                "{}: {} episodes, {} env steps, switch fraction {:.4}",
                summary.metrics_path.display(),
                summary.episodes,
                summary.env_steps,
                summary.switch_fraction()
            );
        }
        Command::Verify {
            tol,
            seed,
            sa_steps,
            fixtures,
        } => {
            let mut opts = SuiteOptions {
                tol,
                seed,
                fixtures,
                ..SuiteOptions::default()
            };
            if let Some(s) = sa_steps {
                opts.sa_steps = s;
            }
            let report = run_theory_suite(&opts)?;
            print!("{report}");
            let failures = report.failures();
            if !failures.is_empty() {
                let names: Vec<&str> = failures.iter().map(|c| c.name.as_str()).collect();
                return Err(HarnessError::Property(names.join(", ")));
            }
        }
        Command::Compare { dir, a, b, metric } => {
            print!("{}", compare_runs(&dir, &a, &b, &metric)?);
        }
        Command::Heatmap { run } => {
            let (grid, files) = aggregate_heatmaps(&run)?;
            println!("# switch activations summed over {files} run(s)");
            for row in grid {
                let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
                println!("{}", cells.join(" "));
            }
        }
        Command::ValidateMetrics { files } => {
            for (path, rows) in validate_metrics(&files)? {
                println!("{}: ok ({rows} rows)", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
