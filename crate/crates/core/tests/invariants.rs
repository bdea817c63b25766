use lobdif::checkpoint::{decode, encode};
use lobdif::denoiser::DenoiserConfig;
use lobdif::diffusion::{forward_chain, DiffusionState, ScheduleConfig};
use lobdif::encoder::{encode_history, EncoderConfig};
use lobdif::evalsuite::{
    decade_gaps, fit_poisson, hawkes_fit, hawkes_loglik, synth_alternating, synth_hawkes, HawkesFitOptions,
    HawkesParams,
};
use lobdif::ingest::{build_windows, normalize_times, Event, TrainingPair};
use lobdif::model::ModelConfig;
use lobdif::numcore::Rng;
use lobdif::sampler::{predict_next, trace_denoising, SamplerConfig};
use lobdif::trainer::{draw_noise, train, NoisedPair, TrainConfig, Trainer};

fn small_config(steps: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            encoder: EncoderConfig {
                dim: 8,
                window: 5,
                num_classes: 3,
                ..Default::default()
            },
            denoiser: DenoiserConfig {
                step_dim: 8,
                ..Default::default()
            },
            schedule: ScheduleConfig {
                steps,
                ..Default::default()
            },
        },
        epochs: 3,
        batch_size: 8,
        ..Default::default()
    }
}

fn smoke_pairs() -> (Vec<TrainingPair>, Vec<TrainingPair>, lobdif::ingest::NormStats) {
    let s = synth_alternating(3, &decade_gaps(3), 0.1, 120, &mut Rng::new(4)).unwrap();
    let norm = normalize_times(&s, 0..90).unwrap();
    let w = build_windows(&s, 5).unwrap();
    let (a, b) = w.split_at(85);
    (a.to_vec(), b.to_vec(), norm)
}

#[test]
fn iterative_chain_variance_matches_closed_form() {
    let sched = ScheduleConfig::default().build().unwrap();
    let x0 = DiffusionState::from_vec(&[0.0], 0);
    let mut rng = Rng::new(11);
    let n = 100_000;
    let marks = [25, 50, 100];
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for _ in 0..n {
        let chain = forward_chain(&x0, &sched, &mut rng);
        for (i, &k) in marks.iter().enumerate() {
            let v = chain[k - 1].t;
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    for (i, &k) in marks.iter().enumerate() {
        let mean = sum[i] / n as f64;
        let var = sq[i] / n as f64 - mean * mean;
        let expect = 1.0 - sched.alpha_bar(k);
        assert!((var / expect - 1.0).abs() < 0.05, "k={k}: {var} vs {expect}");
    }
}

#[test]
fn encoder_output_is_concatenation_of_tracks() {
    let cfg = small_config(10).model;
    let params = lobdif::model::init_params(&cfg, 3).unwrap();
    let ctx: Vec<Event> = (0..5).map(|i| Event::new(0.1 * i as f64 * i as f64, (i % 3) as u8)).collect();
    let out = encode_history(&ctx, &cfg.encoder, &params).unwrap();
    let m = cfg.encoder.dim;
    for r in 0..5 {
        let row = &out.h.data()[r * 3 * m..(r + 1) * 3 * m];
        for (j, part) in [&out.h_te, &out.h_t, &out.h_e].iter().enumerate() {
            assert_eq!(&row[j * m..(j + 1) * m], &part.data()[r * m..(r + 1) * m]);
        }
    }
}

#[test]
fn frozen_batch_loss_decreases_over_first_steps() {
    let (pairs, _, norm) = smoke_pairs();
    let cfg = small_config(100);
    let mut t = Trainer::new(cfg, norm).unwrap();
    let batch: Vec<NoisedPair> = pairs[..8]
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (k, eps) = draw_noise(cfg.seed, 0, i as u64, 100, 4);
            NoisedPair {
                pair: p,
                window: i,
                k,
                eps,
            }
        })
        .collect();
    let losses: Vec<f64> = (0..6).map(|_| t.train_step(&batch).unwrap()).collect();
    let rises = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rises <= 1, "{losses:?}");
    assert!(losses[5] < losses[0], "{losses:?}");
}

#[test]
fn full_run_is_deterministic() {
    let (tr, va, norm) = smoke_pairs();
    let a = train(&tr, &va, norm, small_config(10), |_| {}).unwrap();
    let b = train(&tr, &va, norm, small_config(10), |_| {}).unwrap();
    assert_eq!(a.best_valid_loss.to_bits(), b.best_valid_loss.to_bits());
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
}

#[test]
fn checkpoint_round_trip_preserves_sampling() {
    let (tr, va, norm) = smoke_pairs();
    let ck = train(&tr, &va, norm, small_config(10), |_| {}).unwrap();
    let back = decode(&encode(&ck).unwrap()).unwrap();
    let cfg = SamplerConfig {
        tau: 2,
        ..Default::default()
    };
    let (m1, m2) = (ck.model().unwrap(), back.model().unwrap());
    for (i, p) in va.iter().enumerate() {
        let a = predict_next(&p.context, &m1, &cfg, &ck.norm, i as u64).unwrap();
        let b = predict_next(&p.context, &m2, &cfg, &back.norm, i as u64).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn trace_prior_marginal_is_standard_normal() {
    let cfg = small_config(10).model;
    let model = lobdif::model::Model::new(cfg, 1).unwrap();
    let s = synth_alternating(3, &decade_gaps(3), 0.1, 5005, &mut Rng::new(8)).unwrap();
    let pairs = build_windows(&s, 5).unwrap();
    let ctx: Vec<&[Event]> = pairs.iter().map(|p| p.context.as_slice()).collect();
    let rows = trace_denoising(&ctx, &model, 5, &[10, 0], 3).unwrap();
    assert_eq!(rows.len(), 2 * 5000);
    let prior: Vec<f64> = rows.iter().filter(|r| r.k == 10).map(|r| r.raw_t).collect();
    let mean = prior.iter().sum::<f64>() / prior.len() as f64;
    let var = prior.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / prior.len() as f64;
    assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.1, "mean {mean} var {var}");
}

fn ks_statistic_exp1(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-x).exp();
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn poisson_simulation_passes_ks_against_exp1() {
    let p = HawkesParams::poisson(vec![1.0]);
    let s = synth_hawkes(&p, 10_001, &mut Rng::new(21)).unwrap();
    let d = ks_statistic_exp1(s.gaps());
    // 1% critical value of the one-sample KS statistic.
    assert!(d < 1.628 / (10_000f64).sqrt(), "D = {d}");
}

#[test]
fn long_run_counts_match_stationary_rates() {
    let p = HawkesParams {
        mu: vec![0.3, 0.2, 0.4],
        alpha: vec![vec![0.3, 0.1, 0.05], vec![0.1, 0.2, 0.1], vec![0.0, 0.15, 0.25]],
        decay: 3.0,
    };
    let s = synth_hawkes(&p, 100_000, &mut Rng::new(5)).unwrap();
    let span = s.events().last().unwrap().t;
    let expect = p.stationary_rates().unwrap();
    for (c, (&count, rate)) in s.class_histogram().iter().zip(expect).enumerate() {
        let observed = count as f64 / span;
        assert!((observed / rate - 1.0).abs() < 0.05, "class {c}: {observed} vs {rate}");
    }
}

#[test]
fn fit_on_poisson_data_recovers_rate() {
    let p = HawkesParams::poisson(vec![1.0]);
    let s = synth_hawkes(&p, 10_000, &mut Rng::new(6)).unwrap();
    let fit = hawkes_fit(&s, &[0.5, 1.0, 2.0], &HawkesFitOptions::default()).unwrap();
    assert!((0.9..=1.1).contains(&fit.params.mu[0]), "{:?}", fit.params);
    assert!(fit.params.alpha[0][0] < 0.05, "{:?}", fit.params);
    let pois = fit_poisson(&s).unwrap();
    assert!((pois.mu[0] - 1.0).abs() < 0.05);
}

#[test]
fn fit_is_at_least_as_likely_as_truth() {
    let p = HawkesParams {
        mu: vec![0.4, 0.3],
        alpha: vec![vec![0.3, 0.1], vec![0.2, 0.25]],
        decay: 2.0,
    };
    let s = synth_hawkes(&p, 10_000, &mut Rng::new(7)).unwrap();
    let fit = hawkes_fit(&s, &[1.0, 2.0, 4.0], &HawkesFitOptions::default()).unwrap();
    let truth = hawkes_loglik(&p, &s).unwrap();
    assert!(fit.loglik >= truth - 1e-3 * s.len() as f64, "{} vs {truth}", fit.loglik);
    assert!(fit.converged);
}
