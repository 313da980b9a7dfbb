//! `nope` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric divergence during training.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nope_core::config::{ConfigError, RunConfig};
use nope_core::metrics::{evaluate, sweep_csv, sweep_tau, MetricsReport, ReportFormat};
use nope_core::model::{ModelError, NopeModel, Switches};
use nope_core::synth::{make_split, read_dataset, write_dataset, InstancePair, SynthError};
use nope_core::train::{train, TrainError};
use nope_core::wire::{decode, encode, WireError};
use thiserror::Error;

#[derive(Parser)]
#[command(name = "nope", version, about = "Correspondence, overlap and pose between two robots' object graphs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test JSON-lines datasets (and optional packets).
    GenData {
        /// Gzip the dataset files.
        #[arg(long)]
        gzip: bool,
        /// Also write ego/teammate packets for the first N test pairs.
        #[arg(long, default_value_t = 0)]
        packets: usize,
    },
    /// Train both levels and write `checkpoint.bin` and `train_log.jsonl`.
    Train {
        /// Training dataset; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes `metrics.json` and `metrics.csv`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test dataset; generated from the checkpoint config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Drop the consensus term.
        #[arg(long)]
        no_consensus: bool,
        /// Estimate pose on every pair.
        #[arg(long)]
        no_gating: bool,
    },
    /// Run the pipeline on two packets and print the pose JSON.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ego: PathBuf,
        #[arg(long)]
        mate: PathBuf,
    },
    /// Sweep the decision threshold; writes `tau_sweep.csv`.
    SweepTau {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated thresholds.
        #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        grid: String,
    },
    /// Convert a `metrics.json` report to csv or json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Divergence(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Parameter(m) => Self::Config(m),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<WireError> for CliError {
    fn from(e: WireError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    Ok(c)
}

fn dataset(path: Option<&Path>, config: &RunConfig, test: bool) -> Result<Vec<InstancePair>, CliError> {
    match path {
        Some(p) => Ok(read_dataset(p)?),
        None => {
            let (tr, te) = make_split(
                config.seed,
                config.train_size,
                config.test_size,
                config.non_overlap_mix,
                &config.synth(),
            )?;
            Ok(if test { te } else { tr })
        }
    }
}

fn load_model(path: &Path, common: &Common) -> Result<NopeModel, CliError> {
    let model = NopeModel::load(path)?;
    if common.seed.is_some() || common.config.is_some() {
        eprintln!("note: model hyperparameters come from the checkpoint");
    }
    Ok(model)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = &cli.common;
    std::fs::create_dir_all(&common.out)?;
    match cli.command {
        Command::GenData { gzip, packets } => {
            let c = load_config(common)?;
            let (tr, te) = make_split(c.seed, c.train_size, c.test_size, c.non_overlap_mix, &c.synth())?;
            let ext = if gzip { "jsonl.gz" } else { "jsonl" };
            write_dataset(&common.out.join(format!("train.{ext}")), &tr)?;
            write_dataset(&common.out.join(format!("test.{ext}")), &te)?;
            for (k, pair) in te.iter().take(packets).enumerate() {
                std::fs::write(common.out.join(format!("pair{k:04}_ego.nope")), encode(&pair.ego)?)?;
                std::fs::write(common.out.join(format!("pair{k:04}_mate.nope")), encode(&pair.mate)?)?;
            }
            println!("wrote {} train and {} test pairs to {}", tr.len(), te.len(), common.out.display());
        }
        Command::Train { data } => {
            let c = load_config(common)?;
            let pairs = dataset(data.as_deref(), &c, false)?;
            let mut lines = String::new();
            let outcome = train(&c, &pairs, |e| {
                println!(
                    "phase={:?} epoch={} loss={:.6} instances={} seconds={:.1}",
                    e.phase, e.epoch, e.loss, e.instances, e.seconds
                );
                lines.push_str(&serde_json::to_string(e).expect("log line"));
                lines.push('\n');
            });
            std::fs::write(common.out.join("train_log.jsonl"), &lines)?;
            match outcome {
                Ok(o) => {
                    o.model.save(&common.out.join("checkpoint.bin"))?;
                    println!("saved {}", common.out.join("checkpoint.bin").display());
                }
                Err(TrainError::Divergence {
                    phase,
                    epoch,
                    last_finite,
                    ..
                }) => {
                    last_finite.save(&common.out.join("checkpoint.bin"))?;
                    return Err(CliError::Divergence(format!(
                        "{phase:?} phase epoch {epoch}; last finite checkpoint saved"
                    )));
                }
                Err(TrainError::EmptyDataset) => return Err(CliError::Data("training dataset is empty".into())),
                Err(TrainError::Model(e)) => return Err(e.into()),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            tau,
            no_consensus,
            no_gating,
        } => {
            let model = load_model(&checkpoint, common)?;
            let pairs = dataset(data.as_deref(), &model.config, true)?;
            let tau = tau.unwrap_or(model.config.tau);
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(CliError::Config(format!("tau {tau} outside (0, 1]")));
            }
            let switches = Switches {
                consensus: !no_consensus && model.config.use_consensus,
                gating: !no_gating && model.config.use_gating,
            };
            let report = evaluate(&model, &pairs, tau, switches)?;
            report.write(&common.out.join("metrics.json"), ReportFormat::Json)?;
            report.write(&common.out.join("metrics.csv"), ReportFormat::Csv)?;
            println!("{}", report.summary());
        }
        Command::Infer { checkpoint, ego, mate } => {
            let model = load_model(&checkpoint, common)?;
            let e = decode(&std::fs::read(&ego)?)?;
            let m = decode(&std::fs::read(&mate)?)?;
            let switches = Switches {
                consensus: model.config.use_consensus,
                gating: model.config.use_gating,
            };
            let result = model.infer(&e, &m, model.config.tau, switches)?;
            println!("{}", serde_json::to_string(&result.pose_json()).expect("pose json"));
        }
        Command::SweepTau { checkpoint, data, grid } => {
            let model = load_model(&checkpoint, common)?;
            let pairs = dataset(data.as_deref(), &model.config, true)?;
            let taus = grid
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Config(format!("tau grid: {e}")))?;
            if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
                return Err(CliError::Config("tau grid values must lie in (0, 1]".into()));
            }
            let rows = sweep_tau(&model, &pairs, &taus, model.config.use_consensus)?;
            let csv = sweep_csv(&rows);
            std::fs::write(common.out.join("tau_sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Report { input, format } => {
            let format: ReportFormat = format.parse().map_err(CliError::Config)?;
            let text = std::fs::read_to_string(&input)?;
            let report = MetricsReport::from_json(&text).map_err(|e| CliError::Data(e.to_string()))?;
            let name = match format {
                ReportFormat::Csv => "report.csv",
                ReportFormat::Json => "report.json",
            };
            report.write(&common.out.join(name), format)?;
            println!("{}", report.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
