//! Noise-matching training over rolling windows with best-validation
//! selection and resumable state.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, DiffusionState};
use crate::encoder::ContextFeatures;
use crate::error::{Error, Result};
use crate::ingest::{NormStats, TrainingPair};
use crate::model::{Model, ModelConfig, TrainingGraph};
use crate::numcore::{Adam, AdamConfig, Gradients, ParamStore, Rng, RngState, Session, Tensor};

/// Stream tag for the fixed validation noise.
const VALID_STREAM: u64 = 0xFFFF_FFFE;
/// Stream tag for the window shuffler.
const SHUFFLE_STREAM: u64 = 0xFFFF_FFFD;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 200,
            batch_size: 64,
            lr: 2.0e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

/// Optimizer state needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState {
    pub params: ParamStore,
    pub adam_step: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub shuffle_rng: RngState,
}

/// Training outcome: best-validation parameters plus everything needed to
/// resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub norm: NormStats,
    /// Parameters with the lowest validation loss seen so far.
    pub params: ParamStore,
    /// Completed epochs.
    pub epoch: usize,
    /// Epoch of `params` (0 means the initialization).
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub history: Vec<EpochLog>,
    pub resume: ResumeState,
}

impl Checkpoint {
    /// Inference model with the best parameters.
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.model, self.params.clone())
    }
}

/// Loss-log CSV with header `epoch,train_loss,valid_loss`.
pub fn write_loss_log(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,valid_loss\n");
    for h in history {
        s.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.valid_loss));
    }
    s
}

/// Target state of a pair: standardized log gap and signed one-hot class.
pub fn clean_target(pair: &TrainingPair, norm: &NormStats, num_classes: usize) -> DiffusionState {
    DiffusionState::clean(norm.standardize(pair.target_gap()), pair.target.e.index(), num_classes)
}

/// Graph feeds for one noised pair.
struct PairFeeds {
    feats: ContextFeatures,
    t_k: Tensor,
    e_k: Tensor,
    eps: Tensor,
    k: usize,
}

impl PairFeeds {
    fn new(model: &Model, pair: &TrainingPair, k: usize, eps: &[f64], norm: &NormStats) -> Result<Self> {
        let cfg = model.config();
        let x0 = clean_target(pair, norm, cfg.num_classes());
        let xk = forward_sample(&x0, k, eps, model.schedule())?;
        Ok(Self {
            feats: ContextFeatures::new(&pair.context, &cfg.encoder)?,
            t_k: Tensor::scalar(xk.t),
            e_k: Tensor::row(xk.e),
            eps: Tensor::row(eps.to_vec()),
            k,
        })
    }

    fn forward(&self, s: &mut Session<'_>, model: &Model, tg: &TrainingGraph) -> Result<f64> {
        s.forward(
            model.params(),
            &[
                ("time", &self.feats.time),
                ("event", &self.feats.event),
                ("t_k", &self.t_k),
                ("e_k", &self.e_k),
                ("phi_k", model.step_tensor(self.k)),
                ("eps", &self.eps),
            ],
        )?;
        Ok(s.scalar(tg.loss)?)
    }
}

/// Draws the diffusion step and noise for `window` in `epoch`.
pub fn draw_noise(seed: u64, epoch: u64, window: u64, steps: usize, dim: usize) -> (usize, Vec<f64>) {
    let mut rng = Rng::derived(seed, epoch, window);
    let k = rng.int_inclusive(1, steps);
    let eps = (0..dim).map(|_| rng.normal()).collect();
    (k, eps)
}

/// Summed squared error between `eps` and the network's estimate for the
/// pair's target noised to step `k`.
pub fn loss_term(pair: &TrainingPair, k: usize, eps: &[f64], model: &Model, norm: &NormStats) -> Result<f64> {
    let tg = model.training_graph();
    let mut s = Session::new(&tg.graph);
    PairFeeds::new(model, pair, k, eps, norm)?.forward(&mut s, model, &tg)
}

/// Mean loss over `pairs` with noise fixed by `seed`, independent of the
/// epoch. Evaluated in parallel, summed in order.
pub fn validation_loss(model: &Model, pairs: &[TrainingPair], norm: &NormStats, seed: u64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("validation split has no windows".into()));
    }
    let tg = model.training_graph();
    let (steps, dim) = (model.schedule().steps(), model.config().state_dim());
    let losses: Vec<f64> = pairs
        .par_iter()
        .enumerate()
        .map_init(
            || Session::new(&tg.graph),
            |s, (i, pair)| {
                let (k, eps) = draw_noise(seed, VALID_STREAM, i as u64, steps, dim);
                let loss = PairFeeds::new(model, pair, k, &eps, norm)?.forward(s, model, &tg)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { k, window: i });
                }
                Ok(loss)
            },
        )
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// A pair with its drawn step and noise.
#[derive(Debug, Clone)]
pub struct NoisedPair<'a> {
    pub pair: &'a TrainingPair,
    pub window: usize,
    pub k: usize,
    pub eps: Vec<f64>,
}

/// Stateful trainer: model, optimizer and selection bookkeeping.
pub struct Trainer {
    config: TrainConfig,
    norm: NormStats,
    model: Model,
    adam: Adam,
    graph: Arc<TrainingGraph>,
    grads: Gradients,
    shuffle: Rng,
    epoch: usize,
    best: ParamStore,
    best_epoch: usize,
    best_valid_loss: Option<f64>,
    history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(config: TrainConfig, norm: NormStats) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model, config.seed)?;
        let adam = Adam::new(config.adam(), model.params());
        Ok(Self::assemble(
            config,
            norm,
            model,
            adam,
            Rng::stream(config.seed, SHUFFLE_STREAM),
        ))
    }

    fn assemble(config: TrainConfig, norm: NormStats, model: Model, adam: Adam, shuffle: Rng) -> Self {
        let graph = Arc::new(model.training_graph());
        let grads = Gradients::zeros_like(model.params());
        let best = model.params().clone();
        Self {
            config,
            norm,
            model,
            adam,
            graph,
            grads,
            shuffle,
            epoch: 0,
            best,
            best_epoch: 0,
            best_valid_loss: None,
            history: Vec::new(),
        }
    }

    /// Continues from `ckpt`; `epochs` in `config` is the new total.
    pub fn resume(ckpt: &Checkpoint, epochs: usize) -> Result<Self> {
        let config = TrainConfig { epochs, ..ckpt.config };
        config.validate()?;
        let r = &ckpt.resume;
        let model = Model::from_params(config.model, r.params.clone())?;
        let mut adam = Adam::new(config.adam(), model.params());
        if r.adam_m.len() != adam.m.len() || r.adam_v.len() != adam.v.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        adam.step = r.adam_step;
        adam.m = r.adam_m.clone();
        adam.v = r.adam_v.clone();
        let mut t = Self::assemble(config, ckpt.norm, model, adam, Rng::from_state(r.shuffle_rng));
        t.epoch = ckpt.epoch;
        t.best = ckpt.params.clone();
        t.best_epoch = ckpt.best_epoch;
        t.best_valid_loss = Some(ckpt.best_valid_loss);
        t.history = ckpt.history.clone();
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    /// One optimizer step on the mean loss of `batch`.
    pub fn train_step(&mut self, batch: &[NoisedPair<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let graph = Arc::clone(&self.graph);
        let mut s = Session::new(&graph.graph);
        self.step_with(&mut s, &graph, batch)
    }

    fn step_with(&mut self, s: &mut Session<'_>, tg: &TrainingGraph, batch: &[NoisedPair<'_>]) -> Result<f64> {
        self.grads.zero();
        let weight = Tensor::scalar(1.0 / batch.len() as f64);
        let mut total = 0.0;
        for item in batch {
            let feeds = PairFeeds::new(&self.model, item.pair, item.k, &item.eps, &self.norm)?;
            let loss = feeds.forward(s, &self.model, tg)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    k: item.k,
                    window: item.window,
                });
            }
            total += loss;
            s.backward_into(self.model.params(), tg.loss, &weight, &mut self.grads)?;
        }
        if !self.grads.all_finite() {
            return Err(Error::NonFiniteParams);
        }
        self.adam.step(self.model.params_mut(), &self.grads)?;
        if !self.model.params().all_finite() {
            return Err(Error::NonFiniteParams);
        }
        Ok(total / batch.len() as f64)
    }

    /// One pass over shuffled `train` windows; returns the mean batch loss.
    pub fn train_epoch(&mut self, train: &[TrainingPair]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Config("training split has no windows".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.shuffle.shuffle(&mut order);
        let epoch = self.epoch as u64 + 1;
        let (steps, dim) = (self.model.schedule().steps(), self.model.config().state_dim());
        let graph = Arc::clone(&self.graph);
        let mut s = Session::new(&graph.graph);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<NoisedPair<'_>> = chunk
                .iter()
                .map(|&w| {
                    let (k, eps) = draw_noise(self.config.seed, epoch, w as u64, steps, dim);
                    NoisedPair {
                        pair: &train[w],
                        window: w,
                        k,
                        eps,
                    }
                })
                .collect();
            sum += self.step_with(&mut s, &graph, &batch)?;
            batches += 1;
        }
        Ok(sum / batches as f64)
    }

    fn valid_loss(&self, valid: &[TrainingPair]) -> Result<f64> {
        validation_loss(&self.model, valid, &self.norm, self.config.seed)
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one. The initialization is scored first so that it can be
    /// selected when no epoch improves on it.
    pub fn run(
        &mut self,
        train: &[TrainingPair],
        valid: &[TrainingPair],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<()> {
        if self.best_valid_loss.is_none() {
            self.best_valid_loss = Some(self.valid_loss(valid)?);
            self.best = self.model.params().clone();
        }
        while self.epoch < self.config.epochs {
            let train_loss = self.train_epoch(train)?;
            self.epoch += 1;
            let valid_loss = self.valid_loss(valid)?;
            if valid_loss < self.best_valid_loss.unwrap_or(f64::INFINITY) {
                self.best_valid_loss = Some(valid_loss);
                self.best = self.model.params().clone();
                self.best_epoch = self.epoch;
            }
            let log = EpochLog {
                epoch: self.epoch,
                train_loss,
                valid_loss,
            };
            self.history.push(log);
            on_epoch(&log);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config,
            norm: self.norm,
            params: self.best.clone(),
            epoch: self.epoch,
            best_epoch: self.best_epoch,
            best_valid_loss: self.best_valid_loss.unwrap_or(f64::INFINITY),
            history: self.history.clone(),
            resume: ResumeState {
                params: self.model.params().clone(),
                adam_step: self.adam.step,
                adam_m: self.adam.m.clone(),
                adam_v: self.adam.v.clone(),
                shuffle_rng: self.shuffle.state(),
            },
        }
    }
}

/// Trains from scratch and returns the best-validation checkpoint.
pub fn train(
    train_pairs: &[TrainingPair],
    valid_pairs: &[TrainingPair],
    norm: NormStats,
    config: TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Checkpoint> {
    let mut t = Trainer::new(config, norm)?;
    t.run(train_pairs, valid_pairs, on_epoch)?;
    Ok(t.checkpoint())
}
