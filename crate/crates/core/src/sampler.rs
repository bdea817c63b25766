//! Reverse denoising: single ancestral steps, skip-step sampling and
//! decoding of the final state into an inter-arrival time and a class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::NoisePrediction;
use crate::diffusion::{DiffusionState, Schedule};
use crate::error::{Error, Result};
use crate::ingest::{Event, EventClass, NormStats};
use crate::model::{DenoiserSession, Model};
use crate::numcore::Rng;

/// Stream tag separating sampling noise from training noise.
const SAMPLE_STREAM: u64 = 0xFFFF_FFFF;

/// Noise estimator consulted by the reverse process.
pub trait NoisePredictor {
    /// Estimate of the noise in `x` at its step `x.k`.
    fn predict(&mut self, x: &DiffusionState) -> Result<NoisePrediction>;
}

/// Returns the same noise vector `[eps_t, eps_e..]` at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantNoise(pub Vec<f64>);

impl NoisePredictor for ConstantNoise {
    fn predict(&mut self, _x: &DiffusionState) -> Result<NoisePrediction> {
        Ok(NoisePrediction {
            eps_t: self.0[0],
            eps_e: self.0[1..].to_vec(),
        })
    }
}

/// Wraps a predictor and counts its evaluations.
#[derive(Debug)]
pub struct Counting<P> {
    pub inner: P,
    pub evaluations: usize,
}

impl<P> Counting<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, evaluations: 0 }
    }
}

impl<P: NoisePredictor> NoisePredictor for Counting<P> {
    fn predict(&mut self, x: &DiffusionState) -> Result<NoisePrediction> {
        self.evaluations += 1;
        self.inner.predict(x)
    }
}

/// The trained network conditioned on one encoded history.
pub struct ModelPredictor<'m> {
    session: DenoiserSession<'m>,
    cond: Vec<f64>,
}

impl<'m> ModelPredictor<'m> {
    pub fn new(model: &'m Model, context: &[Event]) -> Result<Self> {
        Ok(Self {
            cond: model.encode(context)?,
            session: model.denoiser(),
        })
    }
}

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(&mut self, x: &DiffusionState) -> Result<NoisePrediction> {
        let p = self.session.predict(&self.cond, x)?;
        if !p.is_finite() {
            return Err(Error::NonFiniteParams);
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Skip stride; must divide the number of diffusion steps.
    pub tau: usize,
    /// Adds posterior-variance noise on every pair but the last.
    pub stochastic: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            tau: 10,
            stochastic: false,
            seed: 0,
        }
    }
}

fn check_tau(tau: usize, steps: usize) -> Result<()> {
    if tau == 0 || tau > steps || steps % tau != 0 {
        return Err(Error::Config(format!("tau={tau} must divide K={steps} and lie in 1..=K")));
    }
    Ok(())
}

fn noise_like(x: &DiffusionState, rng: &mut Rng) -> Vec<f64> {
    (0..x.dim()).map(|_| rng.normal()).collect()
}

/// One ancestral step `x_k -> x_{k-1}`. The added noise has variance
/// `var_post[k]` when `stochastic` is set and is omitted at `k = 1`.
pub fn reverse_step<P: NoisePredictor + ?Sized>(
    x: &DiffusionState,
    schedule: &Schedule,
    predictor: &mut P,
    rng: &mut Rng,
    stochastic: bool,
) -> Result<DiffusionState> {
    let k = x.k;
    if k == 0 || k > schedule.steps() {
        return Err(Error::StepOutOfRange {
            k,
            max: schedule.steps(),
        });
    }
    let eps = predictor.predict(x)?.to_vec();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(k).sqrt();
    let coef = schedule.beta(k) / (1.0 - schedule.alpha_bar(k)).sqrt();
    let mut v: Vec<f64> = x
        .to_vec()
        .iter()
        .zip(&eps)
        .map(|(xi, ei)| inv_sqrt_alpha * (xi - coef * ei))
        .collect();
    if stochastic && k > 1 {
        let sd = schedule.var_post(k).sqrt();
        for (vi, z) in v.iter_mut().zip(noise_like(x, rng)) {
            *vi += sd * z;
        }
    }
    Ok(DiffusionState::from_vec(&v, k - 1))
}

/// Jump from step `k` to step `s < k`:
/// `x_s = sqrt(ab_s) x0_hat + sqrt(1 - ab_s - sigma^2) eps + sigma z`, with
/// `x0_hat = (x_k - sqrt(1 - ab_k) eps) / sqrt(ab_k)`.
/// The square-root argument is clamped at zero.
pub fn skip_step(
    x: &DiffusionState,
    s: usize,
    eps: &[f64],
    schedule: &Schedule,
    sigma: f64,
    noise: Option<&[f64]>,
) -> DiffusionState {
    let (ab_k, ab_s) = (schedule.alpha_bar(x.k), schedule.alpha_bar(s));
    let dir = (1.0 - ab_s - sigma * sigma).max(0.0).sqrt();
    let v: Vec<f64> = x
        .to_vec()
        .iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (xi, ei))| {
            let x0 = (xi - (1.0 - ab_k).sqrt() * ei) / ab_k.sqrt();
            let z = noise.map_or(0.0, |n| sigma * n[i]);
            ab_s.sqrt() * x0 + dir * ei + z
        })
        .collect();
    DiffusionState::from_vec(&v, s)
}

/// Skip-step trajectory from `x_K` visiting `K, K - tau, .., 0`; returns every
/// visited state including the start. Exactly `K / tau` predictor calls.
pub fn sample_skip_trajectory<P: NoisePredictor + ?Sized>(
    x_start: &DiffusionState,
    schedule: &Schedule,
    predictor: &mut P,
    tau: usize,
    stochastic: bool,
    rng: &mut Rng,
) -> Result<Vec<DiffusionState>> {
    let steps = schedule.steps();
    check_tau(tau, steps)?;
    if x_start.k != steps {
        return Err(Error::StepOutOfRange { k: x_start.k, max: steps });
    }
    let mut out = Vec::with_capacity(steps / tau + 1);
    out.push(x_start.clone());
    let mut x = x_start.clone();
    while x.k > 0 {
        let s = x.k - tau;
        let eps = predictor.predict(&x)?.to_vec();
        x = if stochastic && s > 0 {
            let sigma = schedule.var_post(x.k).sqrt();
            let z = noise_like(&x, rng);
            skip_step(&x, s, &eps, schedule, sigma, Some(&z))
        } else {
            skip_step(&x, s, &eps, schedule, 0.0, None)
        };
        if !x.is_finite() {
            return Err(Error::NonFiniteParams);
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Final state of [`sample_skip_trajectory`].
pub fn sample_skip<P: NoisePredictor + ?Sized>(
    x_start: &DiffusionState,
    schedule: &Schedule,
    predictor: &mut P,
    tau: usize,
    stochastic: bool,
    rng: &mut Rng,
) -> Result<DiffusionState> {
    let mut traj = sample_skip_trajectory(x_start, schedule, predictor, tau, stochastic, rng)?;
    Ok(traj.pop().expect("trajectory holds at least the start state"))
}

/// Decoded next-event forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub dt_seconds: f64,
    pub class: EventClass,
    pub raw_t: f64,
    pub raw_e: Vec<f64>,
}

/// Class by argmax (lowest index on ties); time by inverse standardization,
/// clamped at the floor.
pub fn decode(x: &DiffusionState, norm: &NormStats) -> Prediction {
    Prediction {
        dt_seconds: norm.destandardize(x.t),
        class: EventClass(x.argmax_class() as u8),
        raw_t: x.t,
        raw_e: x.e.clone(),
    }
}

/// Standard normal start state for `window_id`, drawn from the sampling
/// stream of `seed`.
pub fn prior_sample(seed: u64, window_id: u64, dim: usize, steps: usize) -> (DiffusionState, Rng) {
    let mut rng = Rng::derived(seed, SAMPLE_STREAM, window_id);
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    (DiffusionState::from_vec(&v, steps), rng)
}

/// Samples the next event after `context`. `window_id` selects the noise
/// stream so batch predictions do not depend on evaluation order.
pub fn predict_next(
    context: &[Event],
    model: &Model,
    config: &SamplerConfig,
    norm: &NormStats,
    window_id: u64,
) -> Result<Prediction> {
    if !model.params().all_finite() {
        return Err(Error::NonFiniteParams);
    }
    let schedule = model.schedule();
    let (x, mut rng) = prior_sample(config.seed, window_id, model.config().state_dim(), schedule.steps());
    let mut pred = ModelPredictor::new(model, context)?;
    let x0 = sample_skip(&x, schedule, &mut pred, config.tau, config.stochastic, &mut rng)?;
    Ok(decode(&x0, norm))
}

/// [`predict_next`] over many contexts in parallel; window ids are positions.
pub fn predict_batch(
    contexts: &[&[Event]],
    model: &Model,
    config: &SamplerConfig,
    norm: &NormStats,
) -> Result<Vec<Prediction>> {
    check_tau(config.tau, model.schedule().steps())?;
    contexts
        .par_iter()
        .enumerate()
        .map(|(i, ctx)| predict_next(ctx, model, config, norm, i as u64))
        .collect()
}

/// One recorded partial state of a denoising trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub window_id: usize,
    pub k: usize,
    pub raw_t: f64,
    pub class: usize,
}

/// Records the states at `checkpoints` (all must be visited by stride
/// `tau`) along deterministic skip trajectories, one per context.
pub fn trace_denoising(
    contexts: &[&[Event]],
    model: &Model,
    tau: usize,
    checkpoints: &[usize],
    seed: u64,
) -> Result<Vec<TraceRow>> {
    let steps = model.schedule().steps();
    check_tau(tau, steps)?;
    if let Some(bad) = checkpoints.iter().find(|&&k| k > steps || k % tau != 0) {
        return Err(Error::Config(format!("checkpoint {bad} is not visited with tau={tau}, K={steps}")));
    }
    let per_window: Vec<Vec<TraceRow>> = contexts
        .par_iter()
        .enumerate()
        .map(|(i, ctx)| -> Result<Vec<TraceRow>> {
            let (x, mut rng) = prior_sample(seed, i as u64, model.config().state_dim(), steps);
            let mut pred = ModelPredictor::new(model, ctx)?;
            let traj = sample_skip_trajectory(&x, model.schedule(), &mut pred, tau, false, &mut rng)?;
            Ok(checkpoints
                .iter()
                .map(|&k| {
                    let st = &traj[(steps - k) / tau];
                    TraceRow {
                        window_id: i,
                        k,
                        raw_t: st.t,
                        class: st.argmax_class(),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_window.into_iter().flatten().collect())
}

/// CSV with header `window_id,k,raw_t,class`.
pub fn write_trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("window_id,k,raw_t,class\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.window_id, r.k, r.raw_t, r.class));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::forward_sample;
    use crate::diffusion::ScheduleConfig;

    fn sched() -> Schedule {
        ScheduleConfig::default().build().unwrap()
    }

    #[test]
    fn zero_noise_zero_state_is_fixed_point() {
        let s = sched();
        let x = DiffusionState::from_vec(&[0.0; 3], 50);
        let y = reverse_step(&x, &s, &mut ConstantNoise(vec![0.0; 3]), &mut Rng::new(1), false).unwrap();
        assert_eq!(y.to_vec(), vec![0.0; 3]);
        assert_eq!(y.k, 49);
        let z = DiffusionState::from_vec(&[0.0; 3], 0);
        assert!(reverse_step(&z, &s, &mut ConstantNoise(vec![0.0; 3]), &mut Rng::new(1), false).is_err());
    }

    #[test]
    fn stochastic_reverse_step_is_seeded() {
        let s = sched();
        let x = DiffusionState::from_vec(&[0.3, -0.1], 40);
        let mut p = ConstantNoise(vec![0.2, 0.1]);
        let a = reverse_step(&x, &s, &mut p, &mut Rng::new(9), true).unwrap();
        let b = reverse_step(&x, &s, &mut p, &mut Rng::new(9), true).unwrap();
        let c = reverse_step(&x, &s, &mut p, &mut Rng::new(9), false).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    /// Returns the exact noise of the forward jump from `x0` at each step.
    struct ExactNoise {
        x0: Vec<f64>,
        schedule: Schedule,
    }

    impl NoisePredictor for ExactNoise {
        fn predict(&mut self, x: &DiffusionState) -> Result<NoisePrediction> {
            let ab = self.schedule.alpha_bar(x.k);
            let v: Vec<f64> =
                x.to_vec().iter().zip(&self.x0).map(|(xk, x0)| (xk - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect();
            Ok(NoisePrediction {
                eps_t: v[0],
                eps_e: v[1..].to_vec(),
            })
        }
    }

    #[test]
    fn ancestral_chain_with_exact_noise_recovers_clean_state() {
        let s = sched();
        let x0 = DiffusionState::clean(0.7, 1, 3);
        let eps = vec![0.5, -1.2, 0.3, 2.0];
        let mut x = forward_sample(&x0, 100, &eps, &s).unwrap();
        let mut p = ExactNoise {
            x0: x0.to_vec(),
            schedule: s.clone(),
        };
        let mut rng = Rng::new(0);
        while x.k > 0 {
            x = reverse_step(&x, &s, &mut p, &mut rng, false).unwrap();
        }
        for (a, b) in x.to_vec().iter().zip(x0.to_vec()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_oracle_recovers_for_all_strides() {
        let s = sched();
        let x0 = DiffusionState::clean(-0.4, 2, 4);
        let eps = vec![0.1, 1.5, -0.7, 0.2, -2.2];
        let xk = forward_sample(&x0, 100, &eps, &s).unwrap();
        for tau in [1, 2, 5, 10, 20, 25, 50, 100] {
            let mut p = Counting::new(ConstantNoise(eps.clone()));
            let out = sample_skip(&xk, &s, &mut p, tau, false, &mut Rng::new(0)).unwrap();
            assert_eq!(p.evaluations, 100 / tau);
            assert_eq!(out.k, 0);
            for (a, b) in out.to_vec().iter().zip(x0.to_vec()) {
                assert!((a - b).abs() < 1e-6, "tau {tau}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn single_jump_when_tau_is_k() {
        let s = sched();
        let x = DiffusionState::from_vec(&[1.0, -1.0], 100);
        let traj =
            sample_skip_trajectory(&x, &s, &mut ConstantNoise(vec![0.3, 0.3]), 100, false, &mut Rng::new(0)).unwrap();
        assert_eq!(traj.len(), 2);
        let expect = (1.0 - (1.0 - s.alpha_bar(100)).sqrt() * 0.3) / s.alpha_bar(100).sqrt();
        assert!((traj[1].t - expect).abs() < 1e-12);
    }

    #[test]
    fn tau_validation() {
        let s = sched();
        let x = DiffusionState::from_vec(&[0.0, 0.0], 100);
        for tau in [0, 3, 101] {
            assert!(sample_skip(&x, &s, &mut ConstantNoise(vec![0.0; 2]), tau, false, &mut Rng::new(0)).is_err());
        }
    }

    #[test]
    fn stochastic_skip_sampling_is_seeded() {
        let s = sched();
        let x = DiffusionState::from_vec(&[0.5, 0.1, -0.3], 100);
        let run = |seed| {
            sample_skip(&x, &s, &mut ConstantNoise(vec![0.1, 0.0, 0.2]), 10, true, &mut Rng::new(seed)).unwrap()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn decode_examples() {
        let norm = NormStats {
            mean_log_dt: -1.0,
            std_log_dt: 0.5,
            floor_dt: 1e-9,
        };
        let x = DiffusionState::from_vec(&[0.0, 0.9, -0.8, -1.1, -1.0], 0);
        let p = decode(&x, &norm);
        assert_eq!(p.class, EventClass(0));
        assert!((p.dt_seconds - 0.1).abs() < 1e-15);
        let tiny = decode(&DiffusionState::from_vec(&[-1e3, 0.0], 0), &norm);
        assert_eq!(tiny.dt_seconds, 1e-9);
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![
            TraceRow {
                window_id: 0,
                k: 100,
                raw_t: 0.5,
                class: 2,
            },
            TraceRow {
                window_id: 0,
                k: 0,
                raw_t: -1.25,
                class: 1,
            },
        ];
        assert_eq!(write_trace_csv(&rows), "window_id,k,raw_t,class\n0,100,0.5,2\n0,0,-1.25,1\n");
    }
}
