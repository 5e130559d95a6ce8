use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use learned_kalman::bench::{self, nclt, ExperimentConfig};
use learned_kalman::fsutil::write_atomic;
use learned_kalman::{Error, Result};

#[derive(Parser)]
#[command(name = "lkf", about = "Model-based and learned Kalman filtering experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the datasets of a scenario into a directory.
    Generate {
        /// Built-in scenario name.
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        scenario: Option<String>,
        /// Experiment config file (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write long-format CSV copies of the datasets.
        #[arg(long)]
        csv: bool,
    },
    /// Train every network method of the scenario stored in a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Overrides the config stored with the datasets.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated method labels; all trained methods when omitted.
        #[arg(long)]
        methods: Option<String>,
        /// Continue from the last-state checkpoints where they exist.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate methods on the test splits and write a report CSV.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated method labels; an empty string selects none.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Write measured runtimes into the CSV (they always go to the sidecar).
        #[arg(long)]
        with_runtime: bool,
        /// Also write per-trajectory MSEs next to the report.
        #[arg(long)]
        per_trajectory: bool,
    },
    /// Merge reports of one scenario into a long CSV and an SVG chart.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Import ground-truth and odometry CSVs into train/validation/test datasets.
    NcltImport {
        #[arg(long, required_unless_present = "synthetic")]
        gt: Option<PathBuf>,
        #[arg(long, required_unless_present = "synthetic")]
        odometry: Option<PathBuf>,
        /// Write synthetic CSVs into the output directory first and import those.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the localization comparison on an imported dataset directory.
    NcltRun {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        with_runtime: bool,
    },
}

fn experiment(config: Option<&Path>, data: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(config.unwrap_or(&data.join("config.toml")))
}

fn nclt_config(config: Option<&Path>) -> Result<nclt::NcltConfig> {
    match config {
        Some(path) => nclt::NcltConfig::load(path),
        None => Ok(nclt::NcltConfig::desk()),
    }
}

fn method_list(methods: Option<&str>) -> Option<Vec<String>> {
    methods.map(|s| s.split(',').map(str::trim).filter(|m| !m.is_empty()).map(str::to_string).collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { scenario, config, out, csv } => {
            let cfg = match (scenario, config) {
                (Some(name), _) => bench::builtin(&name)?,
                (None, Some(path)) => ExperimentConfig::load(&path)?,
                (None, None) => return Err(Error::Config("either --scenario or --config is required".into())),
            };
            let manifest = bench::generate(&cfg, &out, csv)?;
            println!("{}: {} datasets in {}", cfg.scenario, manifest.datasets.len(), out.display());
        }
        Command::Train { data, config, methods, resume } => {
            let cfg = experiment(config.as_deref(), &data)?;
            let only = method_list(methods.as_deref());
            for t in bench::train_all(&cfg, &data, only.as_deref(), resume)? {
                println!("{} noise#{}: best validation {:.3} dB -> {}", t.method, t.noise_index, t.best_val_mse_db, t.checkpoint.display());
            }
        }
        Command::Eval { data, config, methods, out, with_runtime, per_trajectory } => {
            let cfg = experiment(config.as_deref(), &data)?;
            let only = method_list(methods.as_deref());
            let rows = bench::evaluate_all(&cfg, &data, only.as_deref())?;
            if per_trajectory {
                let bytes = bench::report::per_trajectory_csv(&rows)?;
                write_atomic(&out.with_extension("per_trajectory.csv"), &bytes)?;
            }
            let rows: Vec<_> = rows.into_iter().map(|(r, _)| r).collect();
            bench::write_report(&out, &rows, with_runtime)?;
            bench::write_provenance(&out, &cfg, &rows)?;
            for r in &rows {
                println!("{:<28} {:<20} {:>7.2} dB  {:>9.3} dB +- {:.3}", r.scenario, r.method, r.inv_r2_db, r.mse_db, r.sigma_db);
            }
        }
        Command::Compare { reports, out } => {
            let inputs: Vec<&Path> = reports.iter().map(PathBuf::as_path).collect();
            let merged = bench::compare(&inputs, &out)?;
            println!("{} rows -> {} and {}", merged.len(), out.display(), out.with_extension("svg").display());
        }
        Command::NcltImport { gt, odometry, synthetic, config, out } => {
            let cfg = nclt_config(config.as_deref())?;
            let (gt, odometry) = if synthetic {
                let source = cfg.synthetic.ok_or_else(|| Error::Config("config has no [synthetic] source".into()))?;
                let (g, o) = nclt::synthesize(&source)?;
                let (gp, op) = (out.join("ground_truth.csv"), out.join("odometry.csv"));
                write_atomic(&gp, &g)?;
                write_atomic(&op, &o)?;
                (gp, op)
            } else {
                (gt.expect("required by clap"), odometry.expect("required by clap"))
            };
            let imported = nclt::import_files(&gt, &odometry, &cfg.import, &out)?;
            println!(
                "{} steps: {} train, {} validation, {} test sequences",
                imported.steps,
                imported.train.len(),
                imported.validation.len(),
                imported.test.len()
            );
        }
        Command::NcltRun { data, config, out, with_runtime } => {
            let cfg = nclt_config(config.as_deref())?;
            let (train, val, test) = nclt::load_imported(&data)?;
            let rows = nclt::run_experiment(&cfg, (&train, &val, &test), Some(&data))?;
            bench::write_report(&out, &rows, with_runtime)?;
            for r in &rows {
                println!("{:<16} position MSE {:>8.3} dB +- {:.3}", r.method, r.mse_db, r.sigma_db);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
