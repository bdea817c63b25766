//! Time-event encoding of a context window.
//!
//! Each window is embedded three ways: sinusoidal time encoding `Φ(t)`,
//! learned event embedding `Φ(e)` and their sum `Φ(t,e)`. Every embedding
//! passes through its own single-head self-attention track followed by a
//! residual position-wise feed-forward layer, and the three track outputs
//! are concatenated per row into `h`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Event;
use crate::numcore::{Graph, NodeId, ParamStore, Rng, Session, Tensor};

/// Track prefixes, in concatenation order.
pub const TRACKS: [&str; 3] = ["te", "t", "e"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Embedding dimension `M` (even).
    pub dim: usize,
    /// Context length `L`.
    pub window: usize,
    pub num_classes: usize,
    pub use_time_encoding: bool,
    pub use_event_embedding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 50,
            num_classes: 4,
            use_time_encoding: true,
            use_event_embedding: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::Config(format!("embedding dim {} must be even and positive", self.dim)));
        }
        if self.window == 0 {
            return Err(Error::Config("window length must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one event class".into()));
        }
        if !self.use_event_embedding && self.num_classes > self.dim {
            return Err(Error::Config(
                "raw one-hot event input needs num_classes <= dim".into(),
            ));
        }
        Ok(())
    }

    /// Columns of the time feature matrix fed to the graph.
    pub fn time_feature_cols(&self) -> usize {
        if self.use_time_encoding {
            self.dim
        } else {
            1
        }
    }

    /// Columns of the event feature matrix fed to the graph.
    pub fn event_feature_cols(&self) -> usize {
        if self.use_event_embedding {
            self.num_classes
        } else {
            self.dim
        }
    }
}

/// Sinusoidal encoding: entry `j` (1-based) is `cos(t / 10000^((j-1)/M))`
/// for odd `j` and `sin(..)` for even `j`.
pub fn time_encoding(t: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    encode_time_into(t, &frequencies(dim), &mut out);
    out
}

/// `10000^(-i/M)` for `i = 0..M`.
fn frequencies(dim: usize) -> Vec<f64> {
    (0..dim).map(|i| 10000f64.powf(-(i as f64) / dim as f64)).collect()
}

fn encode_time_into(t: f64, freqs: &[f64], out: &mut [f64]) {
    for (i, (o, f)) in out.iter_mut().zip(freqs).enumerate() {
        let arg = t * f;
        *o = if i % 2 == 0 { arg.cos() } else { arg.sin() };
    }
}

/// Graph inputs derived from a context window.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures {
    /// `L x M` sinusoidal encodings, or `L x 1` raw relative times.
    pub time: Tensor,
    /// `L x C` one-hot rows, or `L x M` zero-padded one-hot rows.
    pub event: Tensor,
}

impl ContextFeatures {
    /// Times are taken relative to the first event of the window.
    pub fn new(context: &[Event], config: &EncoderConfig) -> Result<Self> {
        if context.len() != config.window {
            return Err(Error::Shape(format!(
                "context has {} events, encoder expects {}",
                context.len(),
                config.window
            )));
        }
        let origin = context[0].t;
        let l = config.window;
        let tc = config.time_feature_cols();
        let mut time = vec![0.0; l * tc];
        let freqs = frequencies(config.dim);
        for (row, ev) in time.chunks_exact_mut(tc).zip(context) {
            let rel = ev.t - origin;
            if config.use_time_encoding {
                encode_time_into(rel, &freqs, row);
            } else {
                row[0] = rel;
            }
        }
        let ec = config.event_feature_cols();
        let mut event = vec![0.0; l * ec];
        for (r, ev) in context.iter().enumerate() {
            let c = ev.e.index();
            if c >= config.num_classes {
                return Err(Error::Shape(format!(
                    "class {c} outside 0..{}",
                    config.num_classes
                )));
            }
            event[r * ec + c] = 1.0;
        }
        Ok(Self {
            time: Tensor::matrix(l, tc, time),
            event: Tensor::matrix(l, ec, event),
        })
    }
}

pub(crate) fn init_linear(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) {
    store.insert(format!("{prefix}.w"), uniform(rng, fan_in, fan_out, fan_in));
    if bias {
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
    }
}

/// `rows x cols` entries uniform in `±1/sqrt(fan_in)`.
pub(crate) fn uniform(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
    Tensor::matrix(rows, cols, data)
}

/// Embedding parameters, plus the three attention tracks when `tracks` is set.
pub(crate) fn init_encoder(store: &mut ParamStore, rng: &mut Rng, cfg: &EncoderConfig, tracks: bool) {
    let m = cfg.dim;
    if cfg.use_event_embedding {
        store.insert("enc.event_emb", uniform(rng, cfg.num_classes, m, cfg.num_classes));
    }
    if !cfg.use_time_encoding {
        store.insert("enc.time_proj", uniform(rng, 1, m, 1));
    }
    if tracks {
        for tr in TRACKS {
            init_track(store, rng, &format!("enc.{tr}"), m);
        }
    }
}

pub(crate) fn init_track(store: &mut ParamStore, rng: &mut Rng, prefix: &str, m: usize) {
    for w in ["wq", "wk", "wv"] {
        store.insert(format!("{prefix}.{w}"), uniform(rng, m, m, m));
    }
    init_linear(store, rng, &format!("{prefix}.ff1"), m, 4 * m, true);
    init_linear(store, rng, &format!("{prefix}.ff2"), 4 * m, m, true);
}

/// Node handles for the three embeddings of a window.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Embeddings {
    pub te: NodeId,
    pub t: NodeId,
    pub e: NodeId,
}

pub(crate) fn build_embeddings(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    time_in: NodeId,
    event_in: NodeId,
) -> Embeddings {
    let t = if cfg.use_time_encoding {
        time_in
    } else {
        let p = g.param(store, "enc.time_proj");
        g.matmul(time_in, p)
    };
    let e = if cfg.use_event_embedding {
        let w = g.param(store, "enc.event_emb");
        g.matmul(event_in, w)
    } else {
        event_in
    };
    let te = g.add(t, e);
    Embeddings { te, t, e }
}

/// Nodes of one attention track.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TrackNodes {
    /// Attention weights (`rows x L`).
    pub weights: NodeId,
    /// Attention output before the feed-forward layer.
    pub attended: NodeId,
    pub out: NodeId,
}

fn feed_forward(g: &mut Graph, store: &ParamStore, prefix: &str, s: NodeId) -> NodeId {
    let hid = g.linear(store, &format!("{prefix}.ff1"), s);
    let hid = g.relu(hid);
    let ff = g.linear(store, &format!("{prefix}.ff2"), hid);
    g.add(s, ff)
}

/// Full track over all `L` rows: `softmax(QK^T/sqrt(d)) V` then FFN.
pub(crate) fn build_track(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> TrackNodes {
    let m = g.shape(x).1;
    let wq = g.param(store, &format!("{prefix}.wq"));
    let wk = g.param(store, &format!("{prefix}.wk"));
    let wv = g.param(store, &format!("{prefix}.wv"));
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (m as f64).sqrt());
    let weights = g.row_softmax(scores);
    let attended = g.matmul(weights, v);
    let out = feed_forward(g, store, prefix, attended);
    TrackNodes {
        weights,
        attended,
        out,
    }
}

/// The last row of [`build_track`], computed without materializing the
/// other `L - 1` query rows: `q K^T = (q W_K^T) X^T` and `a V = (a X) W_V`.
pub(crate) fn build_track_last(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> TrackNodes {
    let (l, m) = g.shape(x);
    let wq = g.param(store, &format!("{prefix}.wq"));
    let wk = g.param(store, &format!("{prefix}.wk"));
    let wv = g.param(store, &format!("{prefix}.wv"));
    let last = g.slice_rows(x, l - 1, 1);
    let q = g.matmul(last, wq);
    let wkt = g.transpose(wk);
    let u = g.matmul(q, wkt);
    let xt = g.transpose(x);
    let scores = g.matmul(u, xt);
    let scores = g.scale(scores, 1.0 / (m as f64).sqrt());
    let weights = g.row_softmax(scores);
    let mixed = g.matmul(weights, x);
    let attended = g.matmul(mixed, wv);
    let out = feed_forward(g, store, prefix, attended);
    TrackNodes {
        weights,
        attended,
        out,
    }
}

/// Builds the last-row conditioning vector `[h_te ‖ h_t ‖ h_e]` (1 x 3M).
pub(crate) fn build_condition(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    time_in: NodeId,
    event_in: NodeId,
) -> NodeId {
    let emb = build_embeddings(g, store, cfg, time_in, event_in);
    let outs: Vec<NodeId> = [emb.te, emb.t, emb.e]
        .iter()
        .zip(TRACKS)
        .map(|(&x, tr)| build_track_last(g, store, &format!("enc.{tr}"), x).out)
        .collect();
    g.concat_cols(&outs)
}

/// Full encoder output for a window.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `L x 3M`, rows `[h_te ‖ h_t ‖ h_e]`.
    pub h: Tensor,
    pub h_te: Tensor,
    pub h_t: Tensor,
    pub h_e: Tensor,
    /// Per-track `L x L` attention weights, in [`TRACKS`] order.
    pub attention: [Tensor; 3],
}

impl EncoderOutput {
    /// Conditioning vector: the last row of `h`.
    pub fn last_row(&self) -> Vec<f64> {
        self.h.row_slice(self.h.rows() - 1).to_vec()
    }
}

/// Runs all three tracks over every row of the window.
pub fn encode_history(
    context: &[Event],
    config: &EncoderConfig,
    params: &ParamStore,
) -> Result<EncoderOutput> {
    config.validate()?;
    let feats = ContextFeatures::new(context, config)?;
    let l = config.window;
    let mut g = Graph::new();
    let time_in = g.input("time", l, config.time_feature_cols());
    let event_in = g.input("event", l, config.event_feature_cols());
    let emb = build_embeddings(&mut g, params, config, time_in, event_in);
    let tracks: Vec<TrackNodes> = [emb.te, emb.t, emb.e]
        .iter()
        .zip(TRACKS)
        .map(|(&x, tr)| build_track(&mut g, params, &format!("enc.{tr}"), x))
        .collect();
    let outs: Vec<NodeId> = tracks.iter().map(|t| t.out).collect();
    let h = g.concat_cols(&outs);
    let mut s = Session::new(&g);
    s.forward(params, &[("time", &feats.time), ("event", &feats.event)])?;
    let get = |id| -> Result<Tensor> { Ok(s.value(id)?.clone()) };
    Ok(EncoderOutput {
        h: get(h)?,
        h_te: get(tracks[0].out)?,
        h_t: get(tracks[1].out)?,
        h_e: get(tracks[2].out)?,
        attention: [
            get(tracks[0].weights)?,
            get(tracks[1].weights)?,
            get(tracks[2].weights)?,
        ],
    })
}

/// Output of one self-attention track run on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub weights: Tensor,
    /// Attention output before the feed-forward layer.
    pub attended: Tensor,
    pub out: Tensor,
}

/// Runs the track stored under `prefix` (e.g. `enc.te`) on an `L x M` input.
pub fn self_attention_track(x: &Tensor, params: &ParamStore, prefix: &str) -> Result<TrackOutput> {
    let mut g = Graph::new();
    let xin = g.input("x", x.rows(), x.cols());
    let t = build_track(&mut g, params, prefix, xin);
    let mut s = Session::new(&g);
    s.forward(params, &[("x", x)])?;
    Ok(TrackOutput {
        weights: s.value(t.weights)?.clone(),
        attended: s.value(t.attended)?.clone(),
        out: s.value(t.out)?.clone(),
    })
}

/// Learned embedding of class `e`: row `e` of the embedding matrix.
pub fn event_embedding(e: usize, params: &ParamStore, config: &EncoderConfig) -> Result<Vec<f64>> {
    if e >= config.num_classes {
        return Err(Error::Shape(format!("class {e} outside 0..{}", config.num_classes)));
    }
    let w = params
        .get("enc.event_emb")
        .ok_or_else(|| Error::Config("event embedding disabled".into()))?;
    Ok(w.row_slice(e).to_vec())
}
