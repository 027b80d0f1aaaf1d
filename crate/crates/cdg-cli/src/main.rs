//! `cdg` — channel-directed gradient preconditioning toolbox.
//!
//! Exit codes: 0 success, 1 verification failure, 2 invalid arguments,
//! 3 I/O or file-format errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdg_core::analysis::correlation_curve;
use cdg_core::harness::{
    apply_key, cmd_ablate_direction, cmd_sweep, cmd_train, parse_config_file, RunConfig,
};
use cdg_core::precondition::{precondition, Axis, Metric, PrecondConfig};
use cdg_core::verify::{run_suites, VerifyConfig};
use cdg_core::{Error, Tensor4};

#[derive(Parser)]
#[command(
    name = "cdg",
    version,
    about = "Channel-directed gradient preconditioning: verification, training, sweeps, analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verification suites (duality, residual, oracle, kernel,
    /// descent, gradcheck) and print one status line per suite.
    Verify {
        /// Run only the named suite.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Apply a preconditioner to a gradient tensor stored as a CDG1 file.
    Precondition {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        metric: Metric,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = Axis::Output)]
        axis: Axis,
        #[arg(long)]
        rasterize: bool,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
    },
    /// Train per the run configuration and emit accuracy/correlation
    /// reports.
    Train(RunArgs),
    /// Train over a grid of (metric, lambda) cells and aggregate final test
    /// accuracy; lambda 0 is the plain-SGD baseline.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated smoothness levels.
        #[arg(long, default_value = "0,0.5,1,2,5")]
        lambdas: String,
        /// Comma-separated metric names.
        #[arg(long, default_value = "reweighted_h0_code_variant,sobolev_tilde_h1")]
        metrics: String,
    },
    /// Smoothing-direction ablation on convolution tensors.
    Ablate(RunArgs),
    /// Channel-correlation curve of a stored tensor.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = Axis::Output)]
        axis: Axis,
        #[arg(long = "max-d", default_value_t = 16)]
        max_d: usize,
        #[arg(long = "out")]
        output: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding the IDX files (or env CDG_DATA_DIR).
    #[arg(long = "data-dir")]
    data_dir: Option<PathBuf>,
    /// Report output directory.
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Override any config key, e.g. --set lambda=2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl RunArgs {
    fn build(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => parse_config_file(path)?,
            None => RunConfig::default(),
        };
        for pair in &self.sets {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                Error::invalid(format!("--set expects KEY=VALUE, got '{}'", pair))
            })?;
            apply_key(&mut cfg, key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(dir) = &self.data_dir {
            cfg.data_dir = Some(dir.clone());
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        Ok(cfg)
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::UndefinedResult(_) => 2,
        Error::Parse(_) | Error::Io(_) => 3,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Verify { suite, seed } => {
            let cfg = VerifyConfig {
                seed,
                ..Default::default()
            };
            let reports = run_suites(suite.as_deref(), &cfg)?;
            let mut all_ok = true;
            for report in &reports {
                let status = if report.passed { "PASS" } else { "FAIL" };
                println!("suite {:<10} {}  {}", report.name, status, report.detail);
                all_ok &= report.passed;
            }
            Ok(if all_ok { 0 } else { 1 })
        }
        Command::Precondition {
            input,
            output,
            metric,
            lambda,
            beta,
            axis,
            rasterize,
            sigma,
        } => {
            let cfg = PrecondConfig {
                metric,
                lambda,
                blend_beta: beta,
                axis,
                rasterize,
                sigma,
            };
            cfg.validate()?;
            let tensor = Tensor4::load(&input)?;
            let result = precondition(&tensor, &cfg)?;
            result.save(&output)?;
            println!(
                "preconditioned {} -> {} (metric {}, dims {:?})",
                input.display(),
                output.display(),
                metric,
                tensor.dims()
            );
            Ok(0)
        }
        Command::Train(args) => {
            let cfg = args.build()?;
            let outcome = cmd_train(&cfg)?;
            for trial in &outcome.trials {
                println!(
                    "seed {:>3}  metric {:<26}  final train {:.4}  final test {:.4}",
                    trial.seed,
                    trial.metric,
                    trial.train_acc.last().copied().unwrap_or(f64::NAN),
                    trial.final_test_acc()
                );
            }
            println!(
                "reports: {} | {} | {}",
                outcome.paths.accuracy_csv.display(),
                outcome.paths.correlations_csv.display(),
                outcome.paths.summary_json.display()
            );
            Ok(0)
        }
        Command::Sweep {
            run,
            lambdas,
            metrics,
        } => {
            let cfg = run.build()?;
            let lambdas = parse_f64_list(&lambdas)?;
            let metrics = parse_metric_list(&metrics)?;
            let outcome = cmd_sweep(&cfg, &metrics, &lambdas)?;
            for row in &outcome.rows {
                println!(
                    "{:<42} mean {:.4}  std {:.4}  ({} trials)",
                    row.label, row.mean_final_test_acc, row.std_final_test_acc, row.n_trials
                );
            }
            println!("sweep table: {}", outcome.csv.display());
            Ok(0)
        }
        Command::Ablate(args) => {
            let cfg = args.build()?;
            let outcome = cmd_ablate_direction(&cfg)?;
            for row in &outcome.rows {
                println!(
                    "{:<20} metric {:<26} mean {:.4}  std {:.4}  ({} trials)",
                    row.label, row.metric, row.mean_final_test_acc, row.std_final_test_acc, row.n_trials
                );
            }
            println!("ablation table: {}", outcome.csv.display());
            Ok(0)
        }
        Command::Analyze {
            input,
            axis,
            max_d,
            output,
        } => {
            let tensor = Tensor4::load(&input)?;
            let layer = input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "tensor".into());
            let rows = correlation_curve(&tensor, &layer, axis, max_d);
            if rows.is_empty() {
                return Err(Error::UndefinedResult(
                    "every slice pair is degenerate; no correlation to report".into(),
                ));
            }
            use std::io::Write;
            let mut out = std::io::BufWriter::new(std::fs::File::create(&output)?);
            out.write_all(b"layer,axis,d,mean_corr,n_pairs\n")?;
            for row in &rows {
                writeln!(
                    out,
                    "{},{},{},{:.16e},{}",
                    row.layer, row.axis, row.d, row.mean_corr, row.n_pairs
                )?;
            }
            println!("wrote {} rows to {}", rows.len(), output.display());
            Ok(0)
        }
    }
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number '{}' in list", s)))
        })
        .collect()
}

fn parse_metric_list(text: &str) -> Result<Vec<Metric>, Error> {
    text.split(',').map(|s| s.trim().parse()).collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(exit_code_for(&err))
        }
    }
}
