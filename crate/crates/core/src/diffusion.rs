//! Variance schedule and closed-form forward noising of `(t, e)` pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;

/// Linear beta schedule with derived products. Index 0 is the clean data
/// (`alpha_bar[0] = 1`); steps run `1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    var_post: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Schedule {
    /// Betas linear from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(&betas)
    }

    /// Schedule from explicit betas for steps `1..=K`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("betas must be strictly increasing".into()));
        }
        let k = betas.len();
        let mut beta = Vec::with_capacity(k + 1);
        let mut alpha = Vec::with_capacity(k + 1);
        let mut alpha_bar = Vec::with_capacity(k + 1);
        let mut var_post = Vec::with_capacity(k + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        var_post.push(0.0);
        for (i, &b) in betas.iter().enumerate() {
            let a = 1.0 - b;
            let ab = alpha_bar[i] * a;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(ab);
            var_post.push((1.0 - alpha_bar[i]) / (1.0 - ab) * b);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            var_post,
        })
    }

    /// Number of diffusion steps `K`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k]
    }

    /// Cumulative product of alphas, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    /// Posterior variance `(1 - alpha_bar[k-1]) / (1 - alpha_bar[k]) * beta[k]`.
    pub fn var_post(&self, k: usize) -> f64 {
        self.var_post[k]
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::StepOutOfRange {
                k,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// Noised pair: a standardized log inter-arrival channel and a class
/// channel of length `C`, at diffusion step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub t: f64,
    pub e: Vec<f64>,
    pub k: usize,
}

impl DiffusionState {
    /// Clean state: `raw_t` and the signed one-hot of `class`.
    pub fn clean(raw_t: f64, class: usize, num_classes: usize) -> Self {
        let e = (0..num_classes)
            .map(|c| if c == class { 1.0 } else { -1.0 })
            .collect();
        Self { t: raw_t, e, k: 0 }
    }

    pub fn from_vec(v: &[f64], k: usize) -> Self {
        Self {
            t: v[0],
            e: v[1..].to_vec(),
            k,
        }
    }

    /// `[t, e_0, .., e_{C-1}]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.e.len());
        v.push(self.t);
        v.extend_from_slice(&self.e);
        v
    }

    pub fn dim(&self) -> usize {
        1 + self.e.len()
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.e.iter().all(|v| v.is_finite())
    }

    /// Class decoded by argmax; ties go to the lowest index.
    pub fn argmax_class(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.e.iter().enumerate() {
            if *v > self.e[best] {
                best = i;
            }
        }
        best
    }
}

/// `x_k = sqrt(alpha_bar_k) x_0 + sqrt(1 - alpha_bar_k) eps` per channel.
pub fn forward_sample(
    x0: &DiffusionState,
    k: usize,
    eps: &[f64],
    schedule: &Schedule,
) -> Result<DiffusionState> {
    schedule.check_step(k)?;
    if eps.len() != x0.dim() {
        return Err(Error::Shape(format!(
            "noise has {} entries for a {}-dim state",
            eps.len(),
            x0.dim()
        )));
    }
    let ab = schedule.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let v: Vec<f64> = x0.to_vec().iter().zip(eps).map(|(x, n)| a * x + b * n).collect();
    Ok(DiffusionState::from_vec(&v, k))
}

/// Iterates `x_k = sqrt(1 - beta_k) x_{k-1} + sqrt(beta_k) eps_k` with the
/// supplied per-step noise, returning states for `k = 1..=K`.
pub fn forward_chain_with(
    x0: &DiffusionState,
    schedule: &Schedule,
    noises: &[Vec<f64>],
) -> Result<Vec<DiffusionState>> {
    if noises.len() != schedule.steps() {
        return Err(Error::Shape(format!(
            "{} noise vectors for {} steps",
            noises.len(),
            schedule.steps()
        )));
    }
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(schedule.steps());
    for (i, eps) in noises.iter().enumerate() {
        let k = i + 1;
        if eps.len() != x.len() {
            return Err(Error::Shape(format!("noise for step {k} has wrong length")));
        }
        let (a, b) = ((1.0 - schedule.beta(k)).sqrt(), schedule.beta(k).sqrt());
        for (xj, nj) in x.iter_mut().zip(eps) {
            *xj = a * *xj + b * nj;
        }
        out.push(DiffusionState::from_vec(&x, k));
    }
    Ok(out)
}

/// Iterative forward chain with fresh Gaussian noise per step.
pub fn forward_chain(x0: &DiffusionState, schedule: &Schedule, rng: &mut Rng) -> Vec<DiffusionState> {
    let noises: Vec<Vec<f64>> = (0..schedule.steps())
        .map(|_| (0..x0.dim()).map(|_| rng.normal()).collect())
        .collect();
    forward_chain_with(x0, schedule, &noises).expect("noise shapes built to match")
}
