//! Golden fixtures: one `fixture.json` per directory under `fixtures/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use clap::Parser as _;
use lobdif::diffusion::{forward_sample, DiffusionState, Schedule};
use lobdif::numcore::Rng;
use lobdif::sampler::{sample_skip, ConstantNoise, Counting};
use serde::Deserialize;

use crate::config::Cli;

#[derive(Debug, Clone, Deserialize)]
pub struct Fixture {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Absolute tolerance for numeric comparisons.
    pub tolerance: f64,
    #[serde(flatten)]
    pub pipeline: Pipeline,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "pipeline", rename_all = "snake_case")]
pub enum Pipeline {
    /// Runs `lobdif ingest` on `input` and compares produced files with the
    /// expected ones (output name to fixture file name).
    Ingest {
        input: String,
        expected: BTreeMap<String, String>,
    },
    /// Noises `x0` to step K with `eps`, then runs the deterministic skip
    /// sampler with a predictor that always returns `eps`.
    OracleRecovery {
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        taus: Vec<usize>,
        x0: Vec<f64>,
        eps: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureReport {
    pub name: String,
    pub passed: bool,
    /// One line per mismatch.
    pub diffs: Vec<String>,
}

/// The fixture tree shipped with this crate.
pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn list_fixtures(root: &Path) -> anyhow::Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(root).with_context(|| format!("reading {}", root.display()))? {
        let path = entry?.path();
        if path.join("fixture.json").is_file() {
            names.push(path.file_name().expect("directory entry").to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

pub fn load_fixture(root: &Path, name: &str) -> anyhow::Result<Fixture> {
    let path = root.join(name).join("fixture.json");
    if !path.is_file() {
        bail!("no fixture named '{name}' under {}", root.display());
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Cell-by-cell comparison; cells that parse as numbers on both sides are
/// compared within `tol`.
pub fn compare_csv(actual: &str, expected: &str, tol: f64) -> Vec<String> {
    let a: Vec<&str> = actual.lines().collect();
    let e: Vec<&str> = expected.lines().collect();
    let mut diffs = Vec::new();
    if a.len() != e.len() {
        diffs.push(format!("{} rows, expected {}", a.len(), e.len()));
    }
    for (i, (ra, re)) in a.iter().zip(&e).enumerate() {
        let ca: Vec<&str> = ra.split(',').collect();
        let ce: Vec<&str> = re.split(',').collect();
        let same = ca.len() == ce.len()
            && ca.iter().zip(&ce).all(|(x, y)| match (x.trim().parse::<f64>(), y.trim().parse::<f64>()) {
                (Ok(u), Ok(v)) => (u - v).abs() <= tol,
                _ => x.trim() == y.trim(),
            });
        if !same {
            diffs.push(format!("row {}: got '{ra}', expected '{re}'", i + 1));
        }
    }
    diffs
}

fn run_ingest(dir: &Path, fx: &Fixture, input: &str, expected: &BTreeMap<String, String>) -> anyhow::Result<Vec<String>> {
    let work = tempfile::tempdir()?;
    let input = dir.join(input);
    let argv = [
        "lobdif".as_ref(),
        "ingest".as_ref(),
        "--input".as_ref(),
        input.as_os_str(),
        "--out".as_ref(),
        work.path().as_os_str(),
    ];
    let cli = Cli::try_parse_from(argv)?;
    crate::run(cli).map_err(|e| anyhow::anyhow!("ingest failed: {e}"))?;
    let mut diffs = Vec::new();
    for (produced, golden) in expected {
        let actual = std::fs::read_to_string(work.path().join(produced))
            .with_context(|| format!("pipeline did not produce {produced}"))?;
        let want = std::fs::read_to_string(dir.join(golden))?;
        diffs.extend(compare_csv(&actual, &want, fx.tolerance).into_iter().map(|d| format!("{produced}: {d}")));
    }
    Ok(diffs)
}

fn run_oracle(fx: &Fixture, steps: usize, b0: f64, b1: f64, taus: &[usize], x0: &[f64], eps: &[f64]) -> anyhow::Result<Vec<String>> {
    let schedule = Schedule::linear(steps, b0, b1)?;
    let clean = DiffusionState::from_vec(x0, 0);
    let start = forward_sample(&clean, steps, eps, &schedule)?;
    let mut diffs = Vec::new();
    for &tau in taus {
        let mut pred = Counting::new(ConstantNoise(eps.to_vec()));
        let out = sample_skip(&start, &schedule, &mut pred, tau, false, &mut Rng::new(0))?;
        let err = out.to_vec().iter().zip(x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if err > fx.tolerance {
            diffs.push(format!("tau={tau}: max error {err:e} above {:e}", fx.tolerance));
        }
        if pred.evaluations != steps / tau {
            diffs.push(format!("tau={tau}: {} evaluations, expected {}", pred.evaluations, steps / tau));
        }
    }
    Ok(diffs)
}

/// Runs fixture `name` from `root`; an unknown name is an error.
pub fn run_fixture_in(root: &Path, name: &str) -> anyhow::Result<FixtureReport> {
    let fx = load_fixture(root, name)?;
    let dir = root.join(name);
    let diffs = match &fx.pipeline {
        Pipeline::Ingest { input, expected } => run_ingest(&dir, &fx, input, expected)?,
        Pipeline::OracleRecovery {
            steps,
            beta_start,
            beta_end,
            taus,
            x0,
            eps,
        } => run_oracle(&fx, *steps, *beta_start, *beta_end, taus, x0, eps)?,
    };
    Ok(FixtureReport {
        name: fx.name,
        passed: diffs.is_empty(),
        diffs,
    })
}

/// Runs a fixture shipped with this crate.
pub fn run_fixture(name: &str) -> anyhow::Result<FixtureReport> {
    run_fixture_in(&fixtures_dir(), name)
}
