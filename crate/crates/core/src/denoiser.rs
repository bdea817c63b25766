//! Noise-prediction network with separate time and event attention gates.
//!
//! The default arm fuses the noisy pair with the history tracks and the
//! step embedding in two relu branches, gates the concatenated branch
//! features with two softmax attentions computed from `[h ‖ φ_k]`, and reads
//! the noise estimate through linear heads. Two ablation arms replace the
//! whole network: a plain MLP and a GRU over the context embeddings.

use serde::{Deserialize, Serialize};

use crate::encoder::{init_linear, time_encoding, uniform, EncoderConfig};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, ParamStore, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    Lobdif,
    Mlp,
    Gru,
}

impl std::str::FromStr for DenoiserKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lobdif" => Ok(Self::Lobdif),
            "mlp" => Ok(Self::Mlp),
            "gru" => Ok(Self::Gru),
            other => Err(Error::Config(format!("unknown denoiser kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    /// Step-embedding dimension `M_k` (even).
    pub step_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            kind: DenoiserKind::Lobdif,
            step_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_dim == 0 || self.step_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "step embedding dim {} must be even and positive",
                self.step_dim
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of the diffusion step index.
pub fn step_embedding(k: usize, dim: usize) -> Vec<f64> {
    time_encoding(k as f64, dim)
}

/// Noise estimate for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub eps_t: f64,
    pub eps_e: Vec<f64>,
}

impl NoisePrediction {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            eps_t: 0.0,
            eps_e: vec![0.0; num_classes],
        }
    }

    /// `[eps_t, eps_e..]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.eps_e.len());
        v.push(self.eps_t);
        v.extend_from_slice(&self.eps_e);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.eps_t.is_finite() && self.eps_e.iter().all(|v| v.is_finite())
    }
}

/// Width of the conditioning row produced by the history encoder.
pub(crate) fn cond_dim(enc: &EncoderConfig, cfg: &DenoiserConfig) -> usize {
    match cfg.kind {
        DenoiserKind::Gru => enc.dim,
        _ => 3 * enc.dim,
    }
}

pub(crate) fn init_denoiser(store: &mut ParamStore, rng: &mut Rng, enc: &EncoderConfig, cfg: &DenoiserConfig) {
    let (m, c, mk) = (enc.dim, enc.num_classes, cfg.step_dim);
    match cfg.kind {
        DenoiserKind::Lobdif => {
            if mk != m {
                init_linear(store, rng, "den.step_proj", mk, m, false);
            }
            for gate in ["omega_t", "omega_e"] {
                init_linear(store, rng, &format!("den.{gate}.l1"), 3 * m + mk, 2 * m, true);
                init_linear(store, rng, &format!("den.{gate}.l2"), 2 * m, 2 * m, true);
            }
            init_linear(store, rng, "den.t_in", 1, m, true);
            init_linear(store, rng, "den.t_ff", m, m, true);
            init_linear(store, rng, "den.e_in", c, m, true);
            init_linear(store, rng, "den.e_ff", m, m, true);
            init_linear(store, rng, "den.head_t", 2 * m, 1, false);
            init_linear(store, rng, "den.head_e", 2 * m, c, false);
        }
        DenoiserKind::Mlp => {
            let width = 1 + c + 3 * m + mk;
            init_linear(store, rng, "den.mlp.l1", width, 2 * m, true);
            init_linear(store, rng, "den.mlp.l2", 2 * m, 2 * m, true);
            init_linear(store, rng, "den.mlp.l3", 2 * m, 1 + c, true);
        }
        DenoiserKind::Gru => {
            for gate in ["z", "r", "n"] {
                store.insert(format!("den.gru.w{gate}"), uniform(rng, m, m, m));
                store.insert(format!("den.gru.u{gate}"), uniform(rng, m, m, m));
                store.insert(format!("den.gru.b{gate}"), crate::numcore::Tensor::zeros(&[1, m]));
            }
            init_linear(store, rng, "den.mix", 1 + c + m + mk, 2 * m, true);
            init_linear(store, rng, "den.head_t", 2 * m, 1, false);
            init_linear(store, rng, "den.head_e", 2 * m, c, false);
        }
    }
}

/// Graph inputs of the denoiser, each a single row.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DenoiserInputs {
    pub cond: NodeId,
    pub t_k: NodeId,
    pub e_k: NodeId,
    pub phi_k: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DenoiserNodes {
    /// `1 x (1 + C)`: `[eps_t ‖ eps_e]`.
    pub eps: NodeId,
    pub omega_t: Option<NodeId>,
    pub omega_e: Option<NodeId>,
    pub x_hat: Option<NodeId>,
}

fn two_layer(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let h = g.linear(store, &format!("{prefix}.l1"), x);
    let h = g.relu(h);
    g.linear(store, &format!("{prefix}.l2"), h)
}

/// Gated heads: `head(scale * (omega ⊙ x_hat))`. The scale `2M` makes a
/// uniform gate act as the identity, so the heads train at the same rate as
/// an ungated linear layer.
fn gated_head(g: &mut Graph, store: &ParamStore, head: &str, omega: NodeId, x_hat: NodeId) -> NodeId {
    let width = g.shape(x_hat).1 as f64;
    let gated = g.mul(omega, x_hat);
    let gated = g.scale(gated, width);
    g.linear(store, head, gated)
}

pub(crate) fn build_denoiser(
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncoderConfig,
    cfg: &DenoiserConfig,
    inp: DenoiserInputs,
) -> DenoiserNodes {
    let m = enc.dim;
    match cfg.kind {
        DenoiserKind::Lobdif => {
            let phi = if cfg.step_dim != m {
                g.linear(store, "den.step_proj", inp.phi_k)
            } else {
                inp.phi_k
            };
            let h_t = g.slice_cols(inp.cond, m, m);
            let h_e = g.slice_cols(inp.cond, 2 * m, m);
            let z = g.concat_cols(&[inp.cond, inp.phi_k]);
            let st = two_layer(g, store, "den.omega_t", z);
            let omega_t = g.row_softmax(st);
            let se = two_layer(g, store, "den.omega_e", z);
            let omega_e = g.row_softmax(se);

            let pt = g.linear(store, "den.t_in", inp.t_k);
            let pt = g.add(pt, h_t);
            let pt = g.add(pt, phi);
            let t_hat = g.linear(store, "den.t_ff", pt);
            let t_hat = g.relu(t_hat);
            let pe = g.linear(store, "den.e_in", inp.e_k);
            let pe = g.add(pe, h_e);
            let pe = g.add(pe, phi);
            let e_hat = g.linear(store, "den.e_ff", pe);
            let e_hat = g.relu(e_hat);
            let x_hat = g.concat_cols(&[t_hat, e_hat]);

            let eps_t = gated_head(g, store, "den.head_t", omega_t, x_hat);
            let eps_e = gated_head(g, store, "den.head_e", omega_e, x_hat);
            let eps = g.concat_cols(&[eps_t, eps_e]);
            DenoiserNodes {
                eps,
                omega_t: Some(omega_t),
                omega_e: Some(omega_e),
                x_hat: Some(x_hat),
            }
        }
        DenoiserKind::Mlp => {
            let z = g.concat_cols(&[inp.t_k, inp.e_k, inp.cond, inp.phi_k]);
            let h = g.linear(store, "den.mlp.l1", z);
            let h = g.relu(h);
            let h = g.linear(store, "den.mlp.l2", h);
            let h = g.relu(h);
            let eps = g.linear(store, "den.mlp.l3", h);
            DenoiserNodes {
                eps,
                omega_t: None,
                omega_e: None,
                x_hat: None,
            }
        }
        DenoiserKind::Gru => {
            let z = g.concat_cols(&[inp.t_k, inp.e_k, inp.cond, inp.phi_k]);
            let h = g.linear(store, "den.mix", z);
            let h = g.relu(h);
            let eps_t = g.linear(store, "den.head_t", h);
            let eps_e = g.linear(store, "den.head_e", h);
            let eps = g.concat_cols(&[eps_t, eps_e]);
            DenoiserNodes {
                eps,
                omega_t: None,
                omega_e: None,
                x_hat: Some(h),
            }
        }
    }
}

/// Single-layer GRU over the rows of `x` (`L x M`) from a zero state;
/// returns the final hidden row.
pub(crate) fn build_gru(g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
    let (l, m) = g.shape(x);
    let mut pre = Vec::new();
    for gate in ["z", "r", "n"] {
        let w = g.param(store, &format!("den.gru.w{gate}"));
        let b = g.param(store, &format!("den.gru.b{gate}"));
        let xw = g.matmul(x, w);
        pre.push(g.add_row(xw, b));
    }
    let uz = g.param(store, "den.gru.uz");
    let ur = g.param(store, "den.gru.ur");
    let un = g.param(store, "den.gru.un");
    let mut h: Option<NodeId> = None;
    for i in 0..l {
        let xz = g.slice_rows(pre[0], i, 1);
        let xr = g.slice_rows(pre[1], i, 1);
        let xn = g.slice_rows(pre[2], i, 1);
        h = Some(match h {
            // From a zero state the recurrent terms vanish.
            None => {
                let z = g.sigmoid(xz);
                let n = g.tanh(xn);
                let keep = g.affine(z, -1.0, 1.0);
                g.mul(keep, n)
            }
            Some(prev) => {
                let hz = g.matmul(prev, uz);
                let z = g.add(xz, hz);
                let z = g.sigmoid(z);
                let hr = g.matmul(prev, ur);
                let r = g.add(xr, hr);
                let r = g.sigmoid(r);
                let rh = g.mul(r, prev);
                let hn = g.matmul(rh, un);
                let n = g.add(xn, hn);
                let n = g.tanh(n);
                let keep = g.affine(z, -1.0, 1.0);
                let new = g.mul(keep, n);
                let old = g.mul(z, prev);
                g.add(new, old)
            }
        });
    }
    debug_assert_eq!(g.shape(h.expect("window has at least one row")), (1, m));
    h.expect("window has at least one row")
}
