use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::commands;
use crate::config::{BenchConfig, PAPER_SCALE_RUNS};
use crate::error::{exit_code, EXIT_CONFIG};

#[derive(Debug, Parser)]
#[command(name = "cfx", version, about = "Benchmark counterfactual explanation generators")]
pub struct Cli {
    /// TOML configuration; the built-in synthetic benchmark when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed for every derived random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// 50 runs per benchmark instead of the configured count.
    #[arg(long, global = true)]
    pub paper_scale: bool,
    /// Draw reference samples separately for every counterfactual.
    #[arg(long, global = true)]
    pub strict_sampling: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every (dataset, model) pair and the VAEs.
    Train,
    /// Calibrate conformal predictors and report test coverage.
    Calibrate,
    /// Run every generator on sampled factuals and aggregate the metrics.
    Benchmark,
    /// Single-run grid search over penalty weights and step size.
    Gridsearch,
    /// Plot decision regions, search paths and gradient fields.
    Plot {
        /// Plot datasets with more than two features on their first two
        /// principal components.
        #[arg(long)]
        project_pca: bool,
    },
    /// Dump conditional SGLD samples for every model and class.
    Sample,
    /// Print the effective configuration as TOML.
    Config,
}

impl Cli {
    /// The configuration with command-line overrides applied.
    pub fn resolve(&self) -> Result<BenchConfig> {
        let mut cfg = match &self.config {
            Some(p) => BenchConfig::load(p)?,
            None => BenchConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if self.paper_scale {
            cfg.n_runs = PAPER_SCALE_RUNS;
        }
        if self.strict_sampling {
            cfg.strict_sampling = true;
        }
        if let Command::Plot { project_pca: true } = self.command {
            cfg.plot.project_pca = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Execute a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .context("building the worker pool")?;
    pool.install(|| -> Result<()> {
        match cli.command {
            Command::Train => {
                commands::train(&cfg)?;
            }
            Command::Calibrate => {
                commands::calibrate(&cfg)?;
            }
            Command::Benchmark => {
                let out = commands::benchmark(&cfg)?;
                println!("{}", out.report.to_markdown());
            }
            Command::Gridsearch => {
                commands::gridsearch(&cfg)?;
                let md = std::fs::read_to_string(cfg.out.join("results").join("grid_best.md"))?;
                println!("{md}");
            }
            Command::Plot { .. } => {
                crate::plot::plot(&cfg)?;
            }
            Command::Sample => {
                commands::sample(&cfg)?;
            }
            Command::Config => print!("{}", cfg.to_toml()?),
        }
        Ok(())
    })
}

/// Parse, run and map the outcome to an exit code: 0 on success, 1 for
/// configuration and usage errors, 2 for failures during a run.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
