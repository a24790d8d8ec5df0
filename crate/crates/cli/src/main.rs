use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use snips_cli::config::{ExperimentConfig, Overrides};
use snips_cli::experiment::{self, DiagnoseArgs, Setup, MEASUREMENT_FILE};
use snips_cli::prior::ServedPrior;
use snips_core::priors::serve_denoiser;
use snips_core::{check_names, junit_xml, run_suite, text_table, DEFAULT_SUITE_SEED};

/// Posterior sampling for noisy linear inverse problems.
#[derive(Debug, Parser)]
#[command(name = "snips", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Apply the degradation to the input image and write y.snvc
    Degrade(Overrides),
    /// Draw posterior samples for an existing measurement
    Sample {
        /// Measurement file [default: <output dir>/y.snvc]
        #[arg(long)]
        measurement: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Degrade, then sample
    Run(Overrides),
    /// Check whether an estimate is faithful to a measurement
    Diagnose(DiagnoseArgs),
    /// Run the built-in statistical checks
    Suite {
        /// Check to run; repeat or comma-separate. All checks when absent
        #[arg(long, value_delimiter = ',')]
        filter: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_SUITE_SEED)]
        seed: u64,
        /// Write a JUnit XML report here
        #[arg(long)]
        junit: Option<PathBuf>,
        /// Write the text table here as well as to stdout
        #[arg(long)]
        table: Option<PathBuf>,
        /// List the check names and exit
        #[arg(long)]
        list: bool,
    },
    /// Answer denoiser requests on stdin/stdout with an in-process prior
    ServePrior(Overrides),
}

fn setup(overrides: &Overrides) -> Result<Setup> {
    Setup::new(overrides.resolve()?)
}

fn report_sampling(summary: &experiment::SampleSummary) {
    eprintln!(
        "{} chain(s) finished, {} failed; outputs in {}",
        summary.succeeded,
        summary.failed,
        summary.output_dir.display()
    );
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.verb {
        Verb::Degrade(o) => {
            let s = setup(&o)?;
            experiment::degrade(&s)?;
            eprintln!("measurement written to {}", s.output_dir()?.join(MEASUREMENT_FILE).display());
        }
        Verb::Sample { measurement, overrides } => {
            let s = setup(&overrides)?;
            let y = if s.cfg.task.has_measurement() {
                let path = match measurement {
                    Some(p) => p,
                    None => s.cfg.resolved_output_dir().join(MEASUREMENT_FILE),
                };
                Some(experiment::load_measurement(&s, &path)?)
            } else {
                None
            };
            report_sampling(&experiment::sample(&s, y.as_deref())?);
        }
        Verb::Run(o) => report_sampling(&experiment::run(&setup(&o)?)?),
        Verb::Diagnose(args) => {
            let report = experiment::diagnose(&args)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passes_all() {
                return Ok(ExitCode::from(1));
            }
        }
        Verb::Suite {
            filter,
            seed,
            junit,
            table,
            list,
        } => {
            if list {
                for name in check_names() {
                    println!("{name}");
                }
                return Ok(ExitCode::SUCCESS);
            }
            let entries = run_suite(&filter, seed)?;
            let text = text_table(&entries);
            print!("{text}");
            if let Some(path) = table {
                std::fs::write(&path, &text).with_context(|| format!("cannot write {}", path.display()))?;
            }
            if let Some(path) = junit {
                std::fs::write(&path, junit_xml(&entries)).with_context(|| format!("cannot write {}", path.display()))?;
            }
            if entries.iter().any(|e| !e.pass) {
                return Ok(ExitCode::from(1));
            }
        }
        Verb::ServePrior(o) => {
            let spec = match o.prior_from_flags()? {
                Some(p) => p,
                None => match &o.config {
                    Some(path) => ExperimentConfig::load(path)?.prior,
                    None => bail!("serve-prior needs a prior flag or --config"),
                },
            };
            let mut prior = ServedPrior::from_spec(&spec)?;
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            serve_denoiser(stdin, stdout, |x, sigma| {
                prior
                    .denoise(x, sigma)
                    .map_err(|e| snips_core::SnipsError::Numeric(format!("{e:#}")))
            })
            .map_err(|e| anyhow!(e))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            ExitCode::from(2)
        }
    }
}
