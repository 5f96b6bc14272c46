//! Command-line front end: data generation, training, evaluation and the
//! multi-seed ablation harness.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! abort. Log verbosity comes from `DPSW_LOG` (e.g. `DPSW_LOG=info`).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dpsw::datagen::{gen_synthetic, load_csv, split, write_csv, CsvSchema, Dataset};
use dpsw::estimator::{predict_cate, train, Checkpoint, Hyperparams, Mode};
use dpsw::eval::{encoder_attributions, pehe, run_experiment, ExperimentConfig};
use dpsw::Error;

#[derive(Debug, Parser)]
#[command(name = "dpsw", version, about = "Treatment-effect estimation with Pareto-smoothed weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset to CSV.
    Gen {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a per-round JSON-lines log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the mode in the config file.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict effects for a dataset and write metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the multi-seed, multi-mode experiment and write result tables.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// `train` configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainConfig {
    mode: Mode,
    hyperparams: Hyperparams,
    /// Train/validation/test fractions; the test part is held out.
    ratios: [f64; 3],
    /// Defaults to the hyperparameter seed.
    split_seed: Option<u64>,
    data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dpsw,
            hyperparams: Hyperparams::default(),
            ratios: [0.5, 0.25, 0.25],
            split_seed: None,
            data: None,
        }
    }
}

#[derive(Debug, Serialize)]
struct Metrics {
    mode: Mode,
    n: usize,
    mean_cate: f64,
    pehe: Option<f64>,
    attribution_gamma: Option<f64>,
    attribution_delta: Option<f64>,
    attribution_upsilon: Option<f64>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    error: Error,
}

fn code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) => 1,
        Error::Numerical(_) | Error::DegenerateFit(_) | Error::DegenerateDenominator(_) => 3,
        _ => 2,
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Self {
            code: code_for(&error),
            error,
        }
    }
}

/// Errors while reading configuration always count as configuration errors.
fn config_err(e: Error) -> Failure {
    Failure { code: 1, error: e }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(Error::Config(format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&text).map_err(|e| config_err(Error::Config(format!("{}: {e}", path.display()))))
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    let probe = load_csv(path, CsvSchema { assume_block_thirds: false })?;
    if probe.dim() % 3 == 0 {
        Ok(load_csv(path, CsvSchema { assume_block_thirds: true })?)
    } else {
        Ok(probe)
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(Error::from)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(Error::from)?;
    writeln!(f).map_err(Error::from)?;
    Ok(())
}

fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gen { d, n, seed, out } => {
            let data = gen_synthetic(d, n, seed)?;
            write_csv(&data, &out)?;
            log::info!("wrote {n} rows with {d} features to {}", out.display());
        }
        Command::Train { config, data, mode, out } => {
            let mut cfg: TrainConfig = match &config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = m;
            }
            cfg.hyperparams.validate().map_err(config_err)?;
            let data_path = data
                .or(cfg.data.clone())
                .ok_or_else(|| config_err(Error::Config("no data path given".into())))?;
            let ds = load_data(&data_path)?;
            let split_seed = cfg.split_seed.unwrap_or(cfg.hyperparams.seed);
            let [tr, va, _] = split(&ds, cfg.ratios, split_seed)?;
            let result = train(&tr, &va, &cfg.hyperparams, cfg.mode)?;
            Checkpoint::from_training(&result, &cfg.hyperparams).save(&out)?;
            let mut log = std::io::BufWriter::new(std::fs::File::create(log_path(&out)).map_err(Error::from)?);
            for record in &result.log {
                serde_json::to_writer(&mut log, record).map_err(Error::from)?;
                writeln!(log).map_err(Error::from)?;
            }
            log.flush().map_err(Error::from)?;
            log::info!(
                "{}: best round {} of {}, validation objective {}",
                cfg.mode,
                result.best_round,
                result.log.len(),
                result.best_val_objective
            );
        }
        Command::Eval { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint).map_err(config_err)?;
            let model = ck.to_model().map_err(config_err)?;
            let ds = load_data(&data)?;
            let tau = predict_cate(&model, ds.x.view())?;
            let pehe = match (&ds.y0, &ds.y1) {
                (Some(y0), Some(y1)) => Some(pehe(y0, y1, &tau)?),
                _ => None,
            };
            let [g, d, u] = match &ds.blocks {
                Some(b) => encoder_attributions(&model, b),
                None => [None; 3],
            };
            let metrics = Metrics {
                mode: model.mode,
                n: ds.len(),
                mean_cate: tau.iter().sum::<f64>() / tau.len().max(1) as f64,
                pehe,
                attribution_gamma: g,
                attribution_delta: d,
                attribution_upsilon: u,
            };
            write_json(&metrics, &out)?;
        }
        Command::Ablate { config, out_dir } => {
            let cfg: ExperimentConfig = read_json(&config)?;
            cfg.validate().map_err(config_err)?;
            let result = run_experiment(&cfg)?;
            result.write(&out_dir)?;
            let failed = result.records.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} of {} runs aborted", result.records.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DPSW_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
