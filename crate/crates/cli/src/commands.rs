//! One function per subcommand. Each resolves its [`RunConfig`], echoes it
//! into the output directory and writes its primary files there.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context as _;
use lobdif::checkpoint::{load_checkpoint, save_checkpoint};
use lobdif::evalsuite::{
    decade_gaps, score, synth_alternating, synth_hawkes, EvalReport, HawkesParams, Outcome,
};
use lobdif::ingest::{
    build_windows, map_messages, normalize_times, parse_lobster, read_events_csv, split_sizes,
    split_stream, write_events_csv, ClassMapping, Event, EventStream,
};
use lobdif::numcore::Rng;
use lobdif::sampler::{predict_batch, trace_denoising, write_trace_csv, SamplerConfig};
use lobdif::trainer::{train, write_loss_log, Checkpoint};

use crate::config::{EvalArgs, IngestArgs, PredictArgs, RunConfig, SynthArgs, SynthKind, TraceArgs, TrainArgs};
use crate::CliError;

pub const EVENTS_FILE: &str = "events.csv";
pub const NORM_FILE: &str = "norm.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORTS_FILE: &str = "reports.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const TRACE_FILE: &str = "trace.csv";

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required option '{key}'")))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(runtime)
}

fn write_out(cfg: &RunConfig, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = cfg.out.join(name);
    std::fs::write(&path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)?;
    Ok(path)
}

fn prepare(config: Option<&Path>, flags: &impl serde::Serialize) -> Result<RunConfig, CliError> {
    let cfg = RunConfig::resolve(config, flags)?;
    cfg.split_fractions()?;
    cfg.echo().map_err(runtime)?;
    Ok(cfg)
}

fn load_stream(path: &Path, num_classes: usize) -> Result<EventStream, CliError> {
    read_events_csv(&read_text(path)?, Some(num_classes))
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(runtime)
}

fn load_model_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = required(&cfg.checkpoint, "checkpoint")?;
    load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(runtime)
}

/// Flag-level stride check, run before any file is loaded.
fn precheck_taus(taus: &[usize]) -> Result<(), CliError> {
    if taus.is_empty() || taus.contains(&0) {
        return Err(CliError::Usage("tau values must be positive and at least one is required".into()));
    }
    Ok(())
}

/// Rejects strides that do not divide `steps`.
fn check_taus(taus: &[usize], steps: usize) -> Result<(), CliError> {
    if taus.is_empty() {
        return Err(CliError::Usage("at least one tau is required".into()));
    }
    for &tau in taus {
        if tau == 0 || tau > steps || steps % tau != 0 {
            return Err(CliError::Usage(format!("tau={tau} must divide K={steps} and lie in 1..=K")));
        }
    }
    Ok(())
}

/// Test-split windows of the stream at `path` for a checkpointed model.
fn test_windows(cfg: &RunConfig, ck: &Checkpoint) -> Result<Vec<lobdif::ingest::TrainingPair>, CliError> {
    let model_cfg = ck.config.model;
    let stream = load_stream(required(&cfg.data, "data")?, model_cfg.num_classes())?;
    let window = model_cfg.encoder.window;
    let (_, _, test) = split_stream(&stream, cfg.split_fractions()?, window).map_err(runtime)?;
    build_windows(&test, window).map_err(runtime)
}

pub fn cmd_ingest(args: &IngestArgs) -> Result<(), CliError> {
    let cfg = prepare(args.shared.config.as_deref(), args)?;
    let input = required(&cfg.input, "input")?;
    let messages = parse_lobster(&read_text(input)?)
        .with_context(|| format!("parsing {}", input.display()))
        .map_err(runtime)?;
    let mapped = map_messages(&messages, &ClassMapping::default()).map_err(runtime)?;
    let stream = &mapped.stream;
    let (n_train, _, _) = split_sizes(stream.len(), cfg.split_fractions()?);
    let norm = if n_train >= 2 {
        normalize_times(stream, 0..n_train)
    } else {
        warn("training split holds fewer than 2 events; normalizing over the whole stream");
        normalize_times(stream, 0..stream.len())
    }
    .context("computing normalization")
    .map_err(runtime)?;
    write_out(&cfg, EVENTS_FILE, &write_events_csv(stream))?;
    write_out(&cfg, NORM_FILE, &(serde_json::to_string_pretty(&norm).map_err(runtime)? + "\n"))?;
    println!("parsed={} mapped={} dropped={}", mapped.parsed, mapped.mapped, mapped.dropped);
    Ok(())
}

fn hawkes_from(cfg: &RunConfig) -> Result<HawkesParams, CliError> {
    let p = HawkesParams {
        mu: cfg.mu.clone(),
        alpha: if cfg.alpha.0.is_empty() {
            vec![vec![0.0; cfg.mu.len()]; cfg.mu.len()]
        } else {
            cfg.alpha.0.clone()
        },
        decay: cfg.decay,
    };
    p.validate_stationary().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(p)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let cfg = prepare(args.shared.config.as_deref(), args)?;
    let mut rng = Rng::new(cfg.seed);
    let stream = match cfg.kind {
        SynthKind::Alternating => {
            if cfg.num_classes == 0 || cfg.num_classes > u8::MAX as usize {
                return Err(CliError::Usage(format!("class count {} is out of range", cfg.num_classes)));
            }
            let gaps = cfg.gaps.clone().unwrap_or_else(|| decade_gaps(cfg.num_classes));
            synth_alternating(cfg.num_classes, &gaps, cfg.jitter, cfg.events, &mut rng)
                .map_err(|e| CliError::Usage(e.to_string()))?
        }
        SynthKind::Hawkes => {
            let p = hawkes_from(&cfg)?;
            synth_hawkes(&p, cfg.events, &mut rng).map_err(runtime)?
        }
    };
    write_out(&cfg, EVENTS_FILE, &write_events_csv(&stream))?;
    println!("events={} classes={}", stream.len(), stream.num_classes());
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = prepare(args.shared.config.as_deref(), args)?;
    let tc = cfg.train_config();
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let stream = load_stream(required(&cfg.data, "data")?, cfg.num_classes)?;
    let window = cfg.window;
    let (tr, va, _) = split_stream(&stream, cfg.split_fractions()?, window).map_err(runtime)?;
    let norm = normalize_times(&stream, 0..tr.len()).map_err(runtime)?;
    let train_pairs = build_windows(&tr, window).map_err(runtime)?;
    let valid_pairs = build_windows(&va, window).map_err(runtime)?;
    if tc.epochs == 0 {
        warn("epochs=0; the checkpoint holds the initial parameters");
    }
    let ck = train(&train_pairs, &valid_pairs, norm, tc, |log| {
        eprintln!("epoch {} train_loss {:.6} valid_loss {:.6}", log.epoch, log.train_loss, log.valid_loss);
    })
    .context("training aborted")
    .map_err(runtime)?;
    save_checkpoint(&ck, &cfg.out.join(CHECKPOINT_FILE))
        .context("writing checkpoint")
        .map_err(runtime)?;
    write_out(&cfg, LOSS_FILE, &write_loss_log(&ck.history))?;
    write_out(&cfg, NORM_FILE, &(serde_json::to_string_pretty(&norm).map_err(runtime)? + "\n"))?;
    println!(
        "train_windows={} valid_windows={} best_epoch={} best_valid_loss={}",
        train_pairs.len(),
        valid_pairs.len(),
        ck.best_epoch,
        ck.best_valid_loss
    );
    Ok(())
}

/// Scores the checkpoint at one stride, timing the sampler.
pub fn evaluate(
    ck: &Checkpoint,
    pairs: &[lobdif::ingest::TrainingPair],
    sampler: &SamplerConfig,
) -> Result<EvalReport, CliError> {
    let model = ck.model().map_err(runtime)?;
    let contexts: Vec<&[Event]> = pairs.iter().map(|p| p.context.as_slice()).collect();
    let start = Instant::now();
    let preds = predict_batch(&contexts, &model, sampler, &ck.norm).map_err(runtime)?;
    let elapsed = start.elapsed().as_secs_f64();
    let p: Vec<Outcome> = preds.iter().map(Outcome::from).collect();
    let truths: Vec<Outcome> = pairs
        .iter()
        .map(|w| Outcome {
            dt_seconds: w.target_gap(),
            class: w.target.e.index(),
        })
        .collect();
    let mut report = score(&p, &truths, &ck.norm).map_err(runtime)?;
    report.wall_time_per_event = elapsed / pairs.len().max(1) as f64;
    report.tau = Some(sampler.tau);
    report.denoiser_evals = Some(model.schedule().steps() / sampler.tau);
    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = prepare(args.shared.config.as_deref(), args)?;
    precheck_taus(&cfg.tau)?;
    let ck = load_model_checkpoint(&cfg)?;
    check_taus(&cfg.tau, ck.config.model.schedule.steps)?;
    let pairs = test_windows(&cfg, &ck)?;
    let mut csv = format!("{}\n", EvalReport::csv_header());
    for &tau in &cfg.tau {
        let sampler = SamplerConfig {
            tau,
            stochastic: cfg.stochastic,
            seed: cfg.seed,
        };
        let report = evaluate(&ck, &pairs, &sampler)?;
        write_out(&cfg, &format!("report_tau{tau}.txt"), &report.to_text())?;
        let _ = writeln!(csv, "{}", report.csv_row());
        println!(
            "tau={tau} n={} accuracy={:.4} mae_log={:.4} wall_time_per_event={:.3e}",
            report.n, report.accuracy, report.mae_log, report.wall_time_per_event
        );
    }
    write_out(&cfg, REPORTS_FILE, &csv)?;
    Ok(())
}

/// CSV with header `window_id,dt_seconds,class`.
pub fn write_predictions_csv(preds: &[lobdif::sampler::Prediction]) -> String {
    let mut s = String::from("window_id,dt_seconds,class\n");
    for (i, p) in preds.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{}", p.dt_seconds, p.class.0);
    }
    s
}

pub fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let cfg = prepare(args.shared.config.as_deref(), args)?;
    precheck_taus(&cfg.tau)?;
    let ck = load_model_checkpoint(&cfg)?;
    check_taus(&cfg.tau, ck.config.model.schedule.steps)?;
    let model_cfg = ck.config.model;
    let stream = load_stream(required(&cfg.data, "data")?, model_cfg.num_classes())?;
    let window = model_cfg.encoder.window;
    if stream.len() < window {
        return Err(runtime(anyhow::anyhow!(
            "need at least {window} events for one context, got {}",
            stream.len()
        )));
    }
    // Every context of `window` consecutive events, including the final one
    // whose successor is not in the file.
    let ev = stream.events();
    let contexts: Vec<&[Event]> = (0..=ev.len() - window).map(|j| &ev[j..j + window]).collect();
    let model = ck.model().map_err(runtime)?;
    let sampler = SamplerConfig {
        tau: cfg.tau[0],
        stochastic: cfg.stochastic,
        seed: cfg.seed,
    };
    let preds = predict_batch(&contexts, &model, &sampler, &ck.norm).map_err(runtime)?;
    write_out(&cfg, PREDICTIONS_FILE, &write_predictions_csv(&preds))?;
    let last = preds.last().expect("at least one context");
    println!("next dt_seconds={} class={}", last.dt_seconds, last.class.0);
    Ok(())
}

/// `K, 4K/5, .., K/5, 0` rounded to multiples of `tau`.
pub fn default_trace_steps(steps: usize, tau: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=5).rev().map(|i| (steps * i / 5) / tau * tau).collect();
    v.dedup();
    v
}

pub fn cmd_trace(args: &TraceArgs) -> Result<(), CliError> {
    let cfg = prepare(args.shared.config.as_deref(), args)?;
    precheck_taus(&cfg.tau)?;
    let ck = load_model_checkpoint(&cfg)?;
    let steps = ck.config.model.schedule.steps;
    check_taus(&cfg.tau, steps)?;
    let tau = cfg.tau[0];
    let marks = cfg.trace_steps.clone().unwrap_or_else(|| default_trace_steps(steps, tau));
    if let Some(bad) = marks.iter().find(|&&k| k > steps || k % tau != 0) {
        return Err(CliError::Usage(format!("trace step {bad} is not visited with tau={tau}, K={steps}")));
    }
    let pairs = test_windows(&cfg, &ck)?;
    let n = if cfg.windows > pairs.len() {
        warn(&format!("{} windows requested, {} available; tracing all", cfg.windows, pairs.len()));
        pairs.len()
    } else {
        cfg.windows
    };
    let contexts: Vec<&[Event]> = pairs[..n].iter().map(|p| p.context.as_slice()).collect();
    let model = ck.model().map_err(runtime)?;
    let rows = trace_denoising(&contexts, &model, tau, &marks, cfg.seed).map_err(runtime)?;
    write_out(&cfg, TRACE_FILE, &write_trace_csv(&rows))?;
    println!("windows={n} rows={}", rows.len());
    Ok(())
}
