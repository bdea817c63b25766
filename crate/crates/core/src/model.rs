//! Encoder and denoiser assembled into compiled graphs over one parameter
//! store.

use serde::{Deserialize, Serialize};

use crate::denoiser::{
    build_denoiser, build_gru, cond_dim, init_denoiser, step_embedding, DenoiserConfig, DenoiserInputs,
    DenoiserKind, DenoiserNodes, NoisePrediction,
};
use crate::diffusion::{DiffusionState, Schedule, ScheduleConfig};
use crate::encoder::{build_condition, build_embeddings, init_encoder, ContextFeatures, EncoderConfig};
use crate::error::{Error, Result};
use crate::ingest::Event;
use crate::numcore::{Graph, NodeId, ParamStore, Rng, Session, Tensor};

/// Everything that fixes the parameter layout and the diffusion process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.denoiser.validate()?;
        self.schedule.build()?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.encoder.num_classes
    }

    /// Length of `[t, e_0..e_{C-1}]`.
    pub fn state_dim(&self) -> usize {
        1 + self.encoder.num_classes
    }

    pub fn cond_dim(&self) -> usize {
        cond_dim(&self.encoder, &self.denoiser)
    }
}

/// Freshly initialized parameters for `config`. Weights are uniform in
/// `±1/sqrt(fan_in)`, biases zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = Rng::stream(seed, 0x1417);
    let mut store = ParamStore::new();
    let tracks = config.denoiser.kind != DenoiserKind::Gru;
    init_encoder(&mut store, &mut rng, &config.encoder, tracks);
    init_denoiser(&mut store, &mut rng, &config.encoder, &config.denoiser);
    Ok(store)
}

fn build_cond(g: &mut Graph, store: &ParamStore, config: &ModelConfig) -> NodeId {
    let enc = &config.encoder;
    let ti = g.input("time", enc.window, enc.time_feature_cols());
    let ei = g.input("event", enc.window, enc.event_feature_cols());
    match config.denoiser.kind {
        DenoiserKind::Gru => {
            let emb = build_embeddings(g, store, enc, ti, ei);
            build_gru(g, store, emb.te)
        }
        _ => build_condition(g, store, enc, ti, ei),
    }
}

fn denoiser_inputs(g: &mut Graph, config: &ModelConfig, cond: NodeId) -> DenoiserInputs {
    DenoiserInputs {
        cond,
        t_k: g.input("t_k", 1, 1),
        e_k: g.input("e_k", 1, config.num_classes()),
        phi_k: g.input("phi_k", 1, config.denoiser.step_dim),
    }
}

/// Trainable model: configuration, schedule, parameters and the compiled
/// conditioning and denoising graphs.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    schedule: Schedule,
    params: ParamStore,
    steps: Vec<Tensor>,
    cond_graph: Graph,
    cond_out: NodeId,
    den_graph: Graph,
    den_nodes: DenoiserNodes,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self::from_params(self.config, self.params.clone()).expect("layout already validated")
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Self::from_params(config, params)
    }

    /// Wraps existing parameters; names and shapes must match the layout of
    /// `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = init_params(&config, 0)?;
        if reference.names() != params.names() {
            return Err(Error::Config(format!(
                "parameter names do not match the configured layout ({} expected, {} given)",
                reference.len(),
                params.len()
            )));
        }
        for ((name, a), b) in reference.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        let schedule = config.schedule.build()?;
        let steps = (0..=schedule.steps())
            .map(|k| Tensor::row(step_embedding(k, config.denoiser.step_dim)))
            .collect();

        let mut cond_graph = Graph::new();
        let cond_out = build_cond(&mut cond_graph, &params, &config);
        cond_graph.validate()?;

        let mut den_graph = Graph::new();
        let cond_in = den_graph.input("cond", 1, config.cond_dim());
        let inp = denoiser_inputs(&mut den_graph, &config, cond_in);
        let den_nodes = build_denoiser(&mut den_graph, &params, &config.encoder, &config.denoiser, inp);
        den_graph.validate()?;

        Ok(Self {
            config,
            schedule,
            params,
            steps,
            cond_graph,
            cond_out,
            den_graph,
            den_nodes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access for optimizer updates. Shapes must not change.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub(crate) fn step_tensor(&self, k: usize) -> &Tensor {
        &self.steps[k]
    }

    /// Conditioning row for the next event after `context`.
    pub fn encode(&self, context: &[Event]) -> Result<Vec<f64>> {
        let feats = ContextFeatures::new(context, &self.config.encoder)?;
        let mut s = Session::new(&self.cond_graph);
        s.forward(&self.params, &[("time", &feats.time), ("event", &feats.event)])?;
        Ok(s.value(self.cond_out)?.data().to_vec())
    }

    /// Reusable evaluator of the denoising network.
    pub fn denoiser(&self) -> DenoiserSession<'_> {
        DenoiserSession {
            model: self,
            session: Session::new(&self.den_graph),
        }
    }

    /// Graph computing the weighted noise-matching loss of one pair, with
    /// inputs `time`, `event`, `t_k`, `e_k`, `phi_k` and `eps`.
    pub fn training_graph(&self) -> TrainingGraph {
        let mut g = Graph::new();
        let cond = build_cond(&mut g, &self.params, &self.config);
        let inp = denoiser_inputs(&mut g, &self.config, cond);
        let nodes = build_denoiser(&mut g, &self.params, &self.config.encoder, &self.config.denoiser, inp);
        let target = g.input("eps", 1, self.config.state_dim());
        let mse = g.mean_square(nodes.eps, target);
        // Summed squared error over the 1 + C components.
        let loss = g.scale(mse, self.config.state_dim() as f64);
        TrainingGraph { graph: g, loss }
    }
}

/// Compiled per-pair loss graph.
#[derive(Debug)]
pub struct TrainingGraph {
    pub graph: Graph,
    pub loss: NodeId,
}

/// Intermediate quantities of one denoiser evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserTrace {
    pub omega_t: Option<Vec<f64>>,
    pub omega_e: Option<Vec<f64>>,
    pub x_hat: Option<Vec<f64>>,
    pub eps: NoisePrediction,
}

/// Buffers for repeated denoiser evaluations against one model.
pub struct DenoiserSession<'m> {
    model: &'m Model,
    session: Session<'m>,
}

impl DenoiserSession<'_> {
    fn run(&mut self, cond: &[f64], x: &DiffusionState) -> Result<()> {
        let cfg = &self.model.config;
        if cond.len() != cfg.cond_dim() {
            return Err(Error::Shape(format!(
                "conditioning row has {} entries, expected {}",
                cond.len(),
                cfg.cond_dim()
            )));
        }
        if x.e.len() != cfg.num_classes() {
            return Err(Error::Shape(format!(
                "state has {} class entries, expected {}",
                x.e.len(),
                cfg.num_classes()
            )));
        }
        if x.k == 0 || x.k > self.model.schedule.steps() {
            return Err(Error::StepOutOfRange {
                k: x.k,
                max: self.model.schedule.steps(),
            });
        }
        let cond = Tensor::row(cond.to_vec());
        let t_k = Tensor::scalar(x.t);
        let e_k = Tensor::row(x.e.clone());
        self.session.forward(
            &self.model.params,
            &[
                ("cond", &cond),
                ("t_k", &t_k),
                ("e_k", &e_k),
                ("phi_k", self.model.step_tensor(x.k)),
            ],
        )?;
        Ok(())
    }

    fn eps(&self) -> Result<NoisePrediction> {
        let v = self.session.value(self.model.den_nodes.eps)?.data();
        Ok(NoisePrediction {
            eps_t: v[0],
            eps_e: v[1..].to_vec(),
        })
    }

    /// Noise estimate for state `x` at its step `x.k` (in `1..=K`).
    pub fn predict(&mut self, cond: &[f64], x: &DiffusionState) -> Result<NoisePrediction> {
        self.run(cond, x)?;
        self.eps()
    }

    /// Like [`predict`](Self::predict) but also returns the attention gates and
    /// branch features where the architecture has them.
    pub fn trace(&mut self, cond: &[f64], x: &DiffusionState) -> Result<DenoiserTrace> {
        self.run(cond, x)?;
        let n = self.model.den_nodes;
        let grab = |id: Option<NodeId>| -> Result<Option<Vec<f64>>> {
            id.map(|id| Ok(self.session.value(id)?.data().to_vec())).transpose()
        };
        Ok(DenoiserTrace {
            omega_t: grab(n.omega_t)?,
            omega_e: grab(n.omega_e)?,
            x_hat: grab(n.x_hat)?,
            eps: self.eps()?,
        })
    }
}
