//! Metrics, the empirical and Hawkes baselines, synthetic streams and a
//! one-dimensional Wasserstein distance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Event, EventClass, EventStream, NormStats};
use crate::numcore::Rng;
use crate::sampler::Prediction;

/// A next-event forecast or observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub dt_seconds: f64,
    pub class: usize,
}

impl From<&Prediction> for Outcome {
    fn from(p: &Prediction) -> Self {
        Self {
            dt_seconds: p.dt_seconds,
            class: p.class.index(),
        }
    }
}

/// Accuracy and log-time error over a set of forecasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub mae_log: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub wall_time_per_event: f64,
    pub tau: Option<usize>,
    pub denoiser_evals: Option<usize>,
}

impl EvalReport {
    /// `key=value` lines; confusion cells as `confusion_<truth>_<pred>`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("n={}\n", self.n));
        s.push_str(&format!("accuracy={}\n", self.accuracy));
        s.push_str(&format!("mae_log={}\n", self.mae_log));
        s.push_str(&format!("wall_time_per_event={}\n", self.wall_time_per_event));
        if let Some(t) = self.tau {
            s.push_str(&format!("tau={t}\n"));
        }
        if let Some(e) = self.denoiser_evals {
            s.push_str(&format!("denoiser_evals={e}\n"));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                s.push_str(&format!("confusion_{i}_{j}={v}\n"));
            }
        }
        s
    }

    pub fn csv_header() -> &'static str {
        "tau,n,accuracy,mae_log,wall_time_per_event,denoiser_evals"
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{}",
            opt(self.tau),
            self.n,
            self.accuracy,
            self.mae_log,
            self.wall_time_per_event,
            opt(self.denoiser_evals)
        )
    }
}

/// Class accuracy and mean `|log10 dt_pred - log10 dt_true|`, both times
/// floored at `norm.floor_dt`.
pub fn score(predictions: &[Outcome], truths: &[Outcome], norm: &NormStats) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    let n = truths.len();
    let classes = predictions
        .iter()
        .chain(truths)
        .map(|o| o.class + 1)
        .max()
        .unwrap_or(0);
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut hits = 0usize;
    let mut abs = 0.0;
    for (p, t) in predictions.iter().zip(truths) {
        confusion[t.class][p.class] += 1;
        if p.class == t.class {
            hits += 1;
        }
        abs += (p.dt_seconds.max(norm.floor_dt).log10() - t.dt_seconds.max(norm.floor_dt).log10()).abs();
    }
    let denom = n.max(1) as f64;
    Ok(EvalReport {
        n,
        accuracy: hits as f64 / denom,
        mae_log: abs / denom,
        confusion,
        wall_time_per_event: 0.0,
        tau: None,
        denoiser_evals: None,
    })
}

/// Observed outcomes for every rolling window of `stream`.
pub fn window_truths(stream: &EventStream, window: usize) -> Vec<Outcome> {
    let ev = stream.events();
    (window..ev.len())
        .map(|i| Outcome {
            dt_seconds: ev[i].t - ev[i - 1].t,
            class: ev[i].e.index(),
        })
        .collect()
}

/// Always predicts the majority class and the median gap of the training
/// stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalBaseline {
    pub class: usize,
    pub dt_seconds: f64,
}

impl EmpiricalBaseline {
    pub fn predict(&self) -> Outcome {
        Outcome {
            dt_seconds: self.dt_seconds,
            class: self.class,
        }
    }
}

/// Majority class (lowest index on ties) and median gap of `train`.
pub fn baseline_empirical(train: &EventStream) -> Result<EmpiricalBaseline> {
    if train.len() < 2 {
        return Err(Error::Config("empirical baseline needs at least two events".into()));
    }
    let hist = train.class_histogram();
    let class = hist
        .iter()
        .enumerate()
        .fold(0, |best, (i, &c)| if c > hist[best] { i } else { best });
    let mut gaps = train.gaps();
    gaps.sort_by(f64::total_cmp);
    let m = gaps.len();
    let median = if m % 2 == 1 {
        gaps[m / 2]
    } else {
        0.5 * (gaps[m / 2 - 1] + gaps[m / 2])
    };
    Ok(EmpiricalBaseline {
        class,
        dt_seconds: median,
    })
}

/// Multivariate Hawkes process with kernel `alpha[c][d] * w * exp(-w t)`:
/// an event of class `d` raises the intensity of class `c` by
/// `alpha[c][d] * w` and decays at rate `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub mu: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub decay: f64,
}

impl HawkesParams {
    /// Homogeneous Poisson process with per-class rates `mu`.
    pub fn poisson(mu: Vec<f64>) -> Self {
        let c = mu.len();
        Self {
            mu,
            alpha: vec![vec![0.0; c]; c],
            decay: 1.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.mu.len()
    }

    fn check_shape(&self) -> Result<()> {
        let c = self.mu.len();
        if c == 0 || self.alpha.len() != c || self.alpha.iter().any(|r| r.len() != c) {
            return Err(Error::Hawkes("alpha must be C x C with C = len(mu) > 0".into()));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::Hawkes(format!("decay {} must be positive", self.decay)));
        }
        if self.alpha.iter().flatten().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Hawkes("excitation entries must be finite and non-negative".into()));
        }
        if self.mu.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(Error::Hawkes("baseline rates must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Largest eigenvalue modulus of the excitation matrix.
    pub fn spectral_radius(&self) -> f64 {
        let c = self.mu.len();
        let m = DMatrix::from_fn(c, c, |i, j| self.alpha[i][j]);
        m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Requires positive total baseline and spectral radius below one.
    pub fn validate_stationary(&self) -> Result<()> {
        self.check_shape()?;
        if self.mu.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Hawkes("all baseline rates are zero; no events can occur".into()));
        }
        let rho = self.spectral_radius();
        if rho >= 1.0 {
            return Err(Error::Hawkes(format!("spectral radius {rho} >= 1 is not stationary")));
        }
        Ok(())
    }

    /// Long-run per-class rates `(I - alpha)^-1 mu`.
    pub fn stationary_rates(&self) -> Result<Vec<f64>> {
        self.validate_stationary()?;
        let c = self.mu.len();
        let m = DMatrix::from_fn(c, c, |i, j| if i == j { 1.0 } else { 0.0 } - self.alpha[i][j]);
        let mu = nalgebra::DVector::from_column_slice(&self.mu);
        let x = m
            .lu()
            .solve(&mu)
            .ok_or_else(|| Error::Hawkes("I - alpha is singular".into()))?;
        Ok(x.iter().copied().collect())
    }

    /// Per-class intensity at `t` given the history `events` (all before or
    /// at `t`; events at `t` count as past).
    pub fn intensity(&self, events: &[Event], t: f64) -> Vec<f64> {
        let c = self.mu.len();
        let mut s = vec![0.0; c];
        for ev in events {
            if ev.t <= t {
                s[ev.e.index()] += self.decay * (-self.decay * (t - ev.t)).exp();
            }
        }
        (0..c)
            .map(|i| self.mu[i] + (0..c).map(|d| self.alpha[i][d] * s[d]).sum::<f64>())
            .collect()
    }
}

/// Simulates `n_events` events from time 0 by Ogata thinning; the bound is
/// the total intensity just after the current time, which is valid because
/// the intensity only decays between events.
pub fn synth_hawkes(params: &HawkesParams, n_events: usize, rng: &mut Rng) -> Result<EventStream> {
    params.validate_stationary()?;
    let c = params.num_classes();
    let w = params.decay;
    let mut s = vec![0.0; c];
    let mut t = 0.0;
    let mut events = Vec::with_capacity(n_events);
    let rates = |s: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|i| params.mu[i] + (0..c).map(|d| params.alpha[i][d] * s[d]).sum::<f64>())
            .collect()
    };
    while events.len() < n_events {
        let bound: f64 = rates(&s).iter().sum();
        let wait = -rng.uniform_open().ln() / bound;
        t += wait;
        let f = (-w * wait).exp();
        s.iter_mut().for_each(|v| *v *= f);
        let lam = rates(&s);
        let total: f64 = lam.iter().sum();
        if rng.uniform() * bound <= total {
            let mut u = rng.uniform() * total;
            let mut class = c - 1;
            for (i, l) in lam.iter().enumerate() {
                if u < *l {
                    class = i;
                    break;
                }
                u -= l;
            }
            events.push(Event::new(t, class as u8));
            s[class] += w;
        }
    }
    Ok(EventStream::new(events, c)?)
}

/// Per-event recursion terms `R[i][d] = sum_{j<i, e_j=d} w exp(-w (t_i - t_j))`
/// and compensator weights `G[d] = sum_{j: e_j=d} (1 - exp(-w (T - t_j)))`.
struct Recursion {
    r: Vec<f64>,
    g: Vec<f64>,
    classes: Vec<usize>,
    span: f64,
    c: usize,
}

impl Recursion {
    fn new(events: &[Event], c: usize, w: f64) -> Self {
        let n = events.len();
        let mut r = vec![0.0; n * c];
        let t0 = events[0].t;
        let t_end = events[n - 1].t;
        for i in 1..n {
            let f = (-w * (events[i].t - events[i - 1].t)).exp();
            let prev_class = events[i - 1].e.index();
            for d in 0..c {
                let carry = r[(i - 1) * c + d] + if d == prev_class { w } else { 0.0 };
                r[i * c + d] = f * carry;
            }
        }
        let mut g = vec![0.0; c];
        for ev in events {
            g[ev.e.index()] += 1.0 - (-w * (t_end - ev.t)).exp();
        }
        Self {
            r,
            g,
            classes: events.iter().map(|e| e.e.index()).collect(),
            span: t_end - t0,
            c,
        }
    }

    fn loglik(&self, mu: &[f64], alpha: &[Vec<f64>]) -> f64 {
        let c = self.c;
        let mut ll = 0.0;
        for (i, &e) in self.classes.iter().enumerate() {
            let lam = mu[e] + (0..c).map(|d| alpha[e][d] * self.r[i * c + d]).sum::<f64>();
            ll += lam.ln();
        }
        ll - mu.iter().sum::<f64>() * self.span
            - (0..c)
                .map(|k| (0..c).map(|d| alpha[k][d] * self.g[d]).sum::<f64>())
                .sum::<f64>()
    }
}

/// Exact log-likelihood over `[t_first, t_last]`.
pub fn hawkes_loglik(params: &HawkesParams, stream: &EventStream) -> Result<f64> {
    params.check_shape()?;
    if stream.len() < 2 || stream.num_classes() != params.num_classes() {
        return Err(Error::Hawkes("need at least two events with matching class count".into()));
    }
    Ok(Recursion::new(stream.events(), params.num_classes(), params.decay).loglik(&params.mu, &params.alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HawkesFitOptions {
    pub max_iter: usize,
    /// Stop when the relative log-likelihood gain of an iteration is below this.
    pub tol: f64,
}

impl Default for HawkesFitOptions {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesFit {
    pub params: HawkesParams,
    pub loglik: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit before the tolerance.
    pub converged: bool,
    /// Log-likelihood after each accepted iteration for the selected decay.
    pub trace: Vec<f64>,
}

/// Ascent for fixed decay. Each iteration is the gradient step preconditioned
/// by `diag(theta / G)`, i.e. `alpha <- alpha * (sum R / lambda) / G` and
/// `mu <- mu * (sum 1 / lambda) / span`, which keeps parameters non-negative
/// and never decreases the log-likelihood.
fn fit_fixed_decay(stream: &EventStream, w: f64, opts: &HawkesFitOptions) -> HawkesFit {
    let c = stream.num_classes();
    let ev = stream.events();
    let rec = Recursion::new(ev, c, w);
    let hist = stream.class_histogram();
    let mut mu: Vec<f64> = hist.iter().map(|&h| 0.5 * (h as f64).max(0.5) / rec.span).collect();
    let mut alpha = vec![vec![0.1; c]; c];
    let mut ll = rec.loglik(&mu, &alpha);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut mu_acc = vec![0.0; c];
        let mut a_acc = vec![vec![0.0; c]; c];
        for (i, &e) in rec.classes.iter().enumerate() {
            let row = &rec.r[i * c..(i + 1) * c];
            let lam = mu[e] + (0..c).map(|d| alpha[e][d] * row[d]).sum::<f64>();
            mu_acc[e] += mu[e] / lam;
            for d in 0..c {
                a_acc[e][d] += alpha[e][d] * row[d] / lam;
            }
        }
        for k in 0..c {
            mu[k] = mu_acc[k] / rec.span;
            for d in 0..c {
                alpha[k][d] = if rec.g[d] > 0.0 { a_acc[k][d] / rec.g[d] } else { 0.0 };
            }
        }
        let next = rec.loglik(&mu, &alpha);
        trace.push(next);
        let gain = next - ll;
        ll = next;
        if gain.abs() <= opts.tol * ll.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    HawkesFit {
        params: HawkesParams {
            mu,
            alpha,
            decay: w,
        },
        loglik: ll,
        iterations,
        converged,
        trace,
    }
}

/// Maximum-likelihood fit with the decay chosen from `decay_grid`.
pub fn hawkes_fit(stream: &EventStream, decay_grid: &[f64], opts: &HawkesFitOptions) -> Result<HawkesFit> {
    if decay_grid.is_empty() {
        return Err(Error::Hawkes("decay grid is empty".into()));
    }
    if decay_grid.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::Hawkes("decay grid entries must be positive".into()));
    }
    if stream.len() < 100 {
        return Err(Error::Hawkes(format!("need at least 100 events, got {}", stream.len())));
    }
    let span = stream.events()[stream.len() - 1].t - stream.events()[0].t;
    if span <= 0.0 {
        return Err(Error::Hawkes("stream has zero time span".into()));
    }
    let mut best: Option<HawkesFit> = None;
    for &w in decay_grid {
        let fit = fit_fixed_decay(stream, w, opts);
        if best.as_ref().is_none_or(|b| fit.loglik > b.loglik) {
            best = Some(fit);
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Constant-rate fit: per-class counts over the stream's span.
pub fn fit_poisson(stream: &EventStream) -> Result<HawkesParams> {
    if stream.len() < 2 {
        return Err(Error::Hawkes("need at least two events".into()));
    }
    let ev = stream.events();
    let span = ev[ev.len() - 1].t - ev[0].t;
    if span <= 0.0 {
        return Err(Error::Hawkes("stream has zero time span".into()));
    }
    Ok(HawkesParams::poisson(
        stream.class_histogram().iter().map(|&h| h as f64 / span).collect(),
    ))
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = simpson(fa, fm, fb, a, b);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Expected waiting time until the next event (integral of the survival
/// function of the total intensity) and the class with the largest
/// intensity at that time.
pub fn hawkes_predict(params: &HawkesParams, context: &[Event]) -> Result<Outcome> {
    params.check_shape()?;
    let base: f64 = params.mu.iter().sum();
    let last = context.last().map_or(0.0, |e| e.t);
    let lam_now: f64 = params.intensity(context, last).iter().sum();
    let burst = lam_now - base;
    if lam_now <= 0.0 {
        return Err(Error::Hawkes("total intensity is zero".into()));
    }
    let w = params.decay;
    let survival = |s: f64| (-base * s - burst * (1.0 - (-w * s).exp()) / w).exp();
    // Beyond this horizon the survival is below e^-40 under either rate.
    let horizon = 40.0 / if base > 0.0 { base } else { lam_now };
    let dt = if burst == 0.0 {
        1.0 / base
    } else {
        adaptive_simpson(&survival, 0.0, horizon, 1e-12 * horizon.max(1.0))
    };
    let lam = params.intensity(context, last + dt);
    let class = lam
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > lam[b] { i } else { b });
    Ok(Outcome {
        dt_seconds: dt.max(f64::MIN_POSITIVE),
        class,
    })
}

/// Cycles classes `0, 1, .., C-1`; the gap before an event of class `c` is
/// `gaps[c] * exp(jitter * z)` with `z` standard normal.
pub fn synth_alternating(num_classes: usize, gaps: &[f64], jitter: f64, n_events: usize, rng: &mut Rng) -> Result<EventStream> {
    if gaps.len() != num_classes || gaps.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
        return Err(Error::Config("need one positive gap per class".into()));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::Config(format!("jitter {jitter} must be non-negative")));
    }
    let mut t = 0.0;
    let events = (0..n_events)
        .map(|i| {
            let c = i % num_classes;
            if i > 0 {
                let z = if jitter > 0.0 { rng.normal() } else { 0.0 };
                t += gaps[c] * (jitter * z).exp();
            }
            Event::new(t, c as u8)
        })
        .collect();
    Ok(EventStream::new(events, num_classes)?)
}

/// Default gap pattern `10^-c` seconds for class `c`.
pub fn decade_gaps(num_classes: usize) -> Vec<f64> {
    (0..num_classes).map(|c| 10f64.powi(-(c as i32))).collect()
}

/// Bayes-optimal mae_log on an alternating stream with lognormal jitter
/// `sigma`: the predictor knows the class and the median gap, so the error
/// is `E|sigma Z / ln 10|`, computed here by quadrature over `Z`.
pub fn alternating_bayes_mae(jitter: f64) -> f64 {
    let s = jitter / std::f64::consts::LN_10;
    let f = |z: f64| (s * z).abs() * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    // The integrand has a kink at zero; integrate each half separately.
    2.0 * adaptive_simpson(&f, 0.0, 12.0, 1e-14)
}

/// Wasserstein-1 distance between two empirical distributions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("wasserstein distance needs non-empty samples".into()));
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    if xa.len() == xb.len() {
        return Ok(xa.iter().zip(&xb).map(|(x, y)| (x - y).abs()).sum::<f64>() / xa.len() as f64);
    }
    // Integrate |Qa(u) - Qb(u)| over u in [0, 1]; both quantile functions
    // are step functions with jumps at multiples of 1/n.
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        total += (next - u) * (xa[i] - xb[j]).abs();
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Class of every event in `stream` as [`EventClass`] codes.
pub fn classes(stream: &EventStream) -> Vec<EventClass> {
    stream.events().iter().map(|e| e.e).collect()
}
