//! Command-line flags and the flat run configuration they override.
//!
//! The config file and the flags share one key space: every flag that is
//! present is serialized under its field name and layered over the file's
//! JSON object before the merged object is deserialized into [`RunConfig`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lobdif::denoiser::{DenoiserConfig, DenoiserKind};
use lobdif::diffusion::ScheduleConfig;
use lobdif::encoder::EncoderConfig;
use lobdif::model::ModelConfig;
use lobdif::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "lobdif", version, about = "Diffusion-based next-event prediction for limit order books")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a LOBSTER message file into events.csv and norm.json.
    Ingest(IngestArgs),
    /// Generate a synthetic events.csv.
    Synth(SynthArgs),
    /// Train a model and write the checkpoint and loss log.
    Train(TrainArgs),
    /// Score a checkpoint on the test split at one or more strides.
    Eval(EvalArgs),
    /// Predict the next event after every window of a stream.
    Predict(PredictArgs),
    /// Record partial denoising states for test windows.
    Trace(TraceArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SharedArgs {
    /// Flat JSON config file; flags override its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Seed for sampling, initialization and synthetic data
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SplitArgs {
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IngestArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub shared: SharedArgs,
    /// LOBSTER message CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Alternating,
    Hawkes,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub shared: SharedArgs,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<SynthKind>,
    /// Number of events to generate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub events: Option<usize>,
    /// Number of classes for the alternating stream.
    #[arg(long = "C", alias = "num-classes")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// Per-class gaps in seconds (default 10^-c).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaps: Option<Vec<f64>>,
    /// Lognormal jitter of the alternating gaps.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    /// Hawkes baseline rates.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    /// Hawkes excitation matrix, rows separated by ';' and entries by ','.
    #[arg(long, value_parser = parse_matrix)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Matrix>,
    /// Hawkes kernel decay rate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay: Option<f64>,
}

/// Row-major matrix flag value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Matrix(pub Vec<Vec<f64>>);

fn parse_matrix(s: &str) -> Result<Matrix, String> {
    s.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| format!("'{v}': {e}")))
                .collect()
        })
        .collect::<Result<_, _>>()
        .map(Matrix)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Context length (events per window).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Encoder width.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Width of the diffusion-step embedding
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_dim: Option<usize>,
    /// Number of event classes
    #[arg(long = "C", alias = "num-classes")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// Denoiser architecture
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoiser: Option<DenoiserKind>,
    /// Encode timestamps; off gives a time-free ablation
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_time_encoding: Option<bool>,
    /// Embed event classes; off gives a class-free ablation
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_event_embedding: Option<bool>,
    /// Diffusion steps K.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// First noise-schedule coefficient
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    /// Last noise-schedule coefficient
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub shared: SharedArgs,
    /// events.csv to train on
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Training epochs
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Windows per minibatch
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SamplingArgs {
    /// events.csv produced by ingest or synth
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Checkpoint written by train
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Skip strides; each must divide K.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<Vec<usize>>,
    /// Add posterior noise on every skip pair but the last.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stochastic: Option<bool>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TraceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    /// Number of test windows to trace.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub windows: Option<usize>,
    /// Diffusion steps to record, e.g. 100,80,60,40,20,0.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_steps: Option<Vec<usize>>,
}

/// Every option of every command. Keys absent from both the config file and
/// the flags take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub input: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: Vec<f64>,
    pub window: usize,
    pub dim: usize,
    pub step_dim: usize,
    pub num_classes: usize,
    pub denoiser: DenoiserKind,
    pub use_time_encoding: bool,
    pub use_event_embedding: bool,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: Vec<usize>,
    pub stochastic: bool,
    pub windows: usize,
    pub trace_steps: Option<Vec<usize>>,
    pub kind: SynthKind,
    pub events: usize,
    pub gaps: Option<Vec<f64>>,
    pub jitter: f64,
    pub mu: Vec<f64>,
    pub alpha: Matrix,
    pub decay: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let enc = train.model.encoder;
        let den = train.model.denoiser;
        let sched = train.model.schedule;
        Self {
            out: PathBuf::from("run"),
            seed: 0,
            input: None,
            data: None,
            checkpoint: None,
            split: vec![0.8, 0.1, 0.1],
            window: enc.window,
            dim: enc.dim,
            step_dim: den.step_dim,
            num_classes: enc.num_classes,
            denoiser: den.kind,
            use_time_encoding: enc.use_time_encoding,
            use_event_embedding: enc.use_event_embedding,
            steps: sched.steps,
            beta_start: sched.beta_start,
            beta_end: sched.beta_end,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            tau: vec![10],
            stochastic: false,
            windows: 5000,
            trace_steps: None,
            kind: SynthKind::Alternating,
            events: 20_000,
            gaps: None,
            jitter: 0.1,
            mu: Vec::new(),
            alpha: Matrix(Vec::new()),
            decay: 1.0,
        }
    }
}

impl RunConfig {
    /// Layers `flags` over the optional config file.
    pub fn resolve(config_file: Option<&Path>, flags: &impl Serialize) -> Result<Self, CliError> {
        let mut merged = match config_file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Runtime(anyhow::anyhow!("reading config {}: {e}", path.display())))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(CliError::Usage(format!("config {} is not a JSON object", path.display()))),
                    Err(e) => return Err(CliError::Usage(format!("config {}: {e}", path.display()))),
                }
            }
            None => Map::new(),
        };
        let Value::Object(over) = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? else {
            unreachable!("flag structs serialize to objects");
        };
        merged.extend(over);
        serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn split_fractions(&self) -> Result<(f64, f64, f64), CliError> {
        match self.split[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(CliError::Usage(format!("split needs 3 fractions, got {}", self.split.len()))),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    dim: self.dim,
                    window: self.window,
                    num_classes: self.num_classes,
                    use_time_encoding: self.use_time_encoding,
                    use_event_embedding: self.use_event_embedding,
                },
                denoiser: DenoiserConfig {
                    kind: self.denoiser,
                    step_dim: self.step_dim,
                },
                schedule: ScheduleConfig {
                    steps: self.steps,
                    beta_start: self.beta_start,
                    beta_end: self.beta_end,
                },
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }

    /// Writes the effective configuration as `config.json` in `out`.
    pub fn echo(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(self.out.join("config.json"), text + "\n")?;
        Ok(())
    }
}
