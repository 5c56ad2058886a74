use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use reflow_core::experiment::{
    self, figure_data, gradcheck_series, ExperimentConfig, ExperimentKind, FigureId, RunOptions,
    SeedStatus, OUTPUT_ROOT_ENV,
};
use reflow_core::field::GRADCHECK_TOLERANCE;

/// Model-collapse and reflow experiments on Gaussian toy problems.
#[derive(Parser)]
#[command(name = "reflow", version, about)]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set reflow.lambda=0.3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run directory (overrides the `output` key).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Seeds run in parallel.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Default output root when neither `output` nor `--output` is set.
        #[arg(long, env = OUTPUT_ROOT_ENV)]
        output_root: Option<PathBuf>,
    },
    /// Write the plot-ready CSV bundle for a figure from a finished run.
    FigureData {
        run_dir: PathBuf,
        /// One of fig4, fig6, fig2-demo.
        figure: String,
    },
    /// Parse and check a config file, then print the resolved config.
    Validate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference gradient check of every field architecture.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        batches: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Data preset that fixes the dimension.
        #[arg(long, default_value = "mix-2d")]
        preset: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(config: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    ExperimentConfig::load(config, overrides)
        .with_context(|| format!("loading config {}", config.display()))
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            config,
            mut overrides,
            output,
            workers,
            output_root,
        } => {
            if let Some(o) = output {
                overrides.push(format!("output={}", o.display()));
            }
            let mut cfg = load(&config, &overrides)?;
            if cfg.output.is_none() {
                if let Some(root) = output_root {
                    cfg.output = Some(root.join(&cfg.name));
                }
            }
            log::info!(
                "running {} `{}` over {} seeds into {}",
                cfg.kind,
                cfg.name,
                cfg.seeds.len(),
                cfg.run_dir().display()
            );
            let manifest = experiment::run(&cfg, RunOptions { workers })?;
            log::info!("finished in {:.1}s", manifest.wall_clock_s);
            for s in &manifest.seeds {
                match &s.status {
                    SeedStatus::Ok => println!("seed {}: ok ({:.1}s)", s.seed, s.wall_clock_s),
                    SeedStatus::Failed { reason } => println!("seed {}: failed: {reason}", s.seed),
                }
            }
            println!("run directory: {}", manifest.run_dir.display());
            Ok(if manifest.all_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::FigureData { run_dir, figure } => {
            let fig: FigureId = figure.parse()?;
            for f in figure_data(&run_dir, fig)? {
                println!("{}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            experiment::ensure_writable(&cfg.run_dir())
                .with_context(|| format!("output directory {}", cfg.run_dir().display()))?;
            print!("{}", cfg.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            seed,
            batches,
            batch_size,
            h,
            preset,
        } => {
            let mut cfg = ExperimentConfig::defaults(ExperimentKind::GradCheck);
            cfg.preset = preset.parse()?;
            cfg.gradcheck.batches = batches;
            cfg.gradcheck.batch_size = batch_size;
            cfg.gradcheck.h = h;
            cfg.validate()?;
            let (series, worst) = gradcheck_series(&cfg, seed)?;
            for c in &series.columns {
                let max = c.values.iter().cloned().fold(0.0, f64::max);
                println!("{:<12} max relative error {max:.3e}", c.name);
            }
            let pass = worst <= GRADCHECK_TOLERANCE;
            println!(
                "{}: worst {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})",
                if pass { "PASS" } else { "FAIL" }
            );
            Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
