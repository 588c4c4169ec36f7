//! Model configuration, the parameter tree and initialisation.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::decoder::Decoder;
use super::gat::{GatLayer, LANE_CODES};
use super::lstm::Encoder;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::graph::EDGE_FEATURES;
use crate::trajectory::{Horizon, NODE_FEATURES};

pub const LANE_BIAS_INIT: [f64; LANE_CODES] = [0.0, 0.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub lstm_hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub gat_layers: usize,
    pub edge_dim: usize,
    pub decoder_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: NODE_FEATURES,
            lstm_hidden: 64,
            heads: 4,
            head_dim: 32,
            gat_layers: 2,
            edge_dim: EDGE_FEATURES,
            decoder_hidden: 256,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim != NODE_FEATURES || self.edge_dim != EDGE_FEATURES {
            return Err(Error::Config(format!(
                "input_dim must be {NODE_FEATURES} and edge_dim {EDGE_FEATURES}"
            )));
        }
        for (name, v) in [
            ("lstm_hidden", self.lstm_hidden),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("gat_layers", self.gat_layers),
            ("decoder_hidden", self.decoder_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub encoder: Encoder,
    pub gat: Vec<GatLayer>,
    pub lane_bias: Tensor,
    /// One head per horizon, in `Horizon::ALL` order.
    pub decoders: Vec<Decoder>,
}

/// Name prefix shared by all encoder tensors.
pub const ENCODER_PREFIX: &str = "encoder.";

impl Params {
    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let e = config.embed_dim();
        Self {
            encoder: Encoder::zeros(config.input_dim, config.lstm_hidden, e),
            gat: (0..config.gat_layers)
                .map(|_| GatLayer::zeros(e, config.heads, config.head_dim))
                .collect(),
            lane_bias: Tensor::zeros(&[LANE_CODES]),
            decoders: Horizon::ALL
                .iter()
                .map(|h| Decoder::zeros(e, config.decoder_hidden, h.steps()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        for (_, t) in p.tensors_mut() {
            t.fill_zero();
        }
        p
    }

    /// Glorot-uniform matrices, zero biases, unit LayerNorm gains and the
    /// lane bias at `[0, 0, 0, 1]`. Tensors are filled in `tensors()` order.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_dim = config.head_dim;
        for (name, t) in p.tensors_mut() {
            let leaf = name.rsplit('.').next().unwrap_or("");
            let fans = match leaf {
                "w_ih" | "w_hh" | "w" | "w1" | "w2" => Some((t.shape[1], t.shape[0])),
                "w_edge" => Some((t.shape[1], head_dim)),
                "att_dst" | "att_src" | "att_edge" => Some((t.shape[1], 1)),
                _ => None,
            };
            match (fans, leaf) {
                (Some((fan_in, fan_out)), _) => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for v in t.data.iter_mut() {
                        *v = rng.gen_range(-limit..limit);
                    }
                }
                (None, "ln_gamma") => t.data.fill(1.0),
                (None, "lane_bias") => t.data.copy_from_slice(&LANE_BIAS_INIT),
                _ => {}
            }
        }
        p
    }

    /// `(name, tensor)` in a fixed order shared by checkpoints and init.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (dir, l) in [("fwd", &self.encoder.fwd), ("bwd", &self.encoder.bwd)] {
            out.push((format!("encoder.{dir}.w_ih"), &l.w_ih));
            out.push((format!("encoder.{dir}.w_hh"), &l.w_hh));
            out.push((format!("encoder.{dir}.b"), &l.b));
        }
        out.push(("encoder.proj.w".into(), &self.encoder.proj.w));
        out.push(("encoder.proj.b".into(), &self.encoder.proj.b));
        for (i, g) in self.gat.iter().enumerate() {
            out.push((format!("gat{i}.w"), &g.w));
            out.push((format!("gat{i}.att_dst"), &g.att_dst));
            out.push((format!("gat{i}.att_src"), &g.att_src));
            out.push((format!("gat{i}.att_edge"), &g.att_edge));
            out.push((format!("gat{i}.w_edge"), &g.w_edge));
            out.push((format!("gat{i}.ln_gamma"), &g.ln_gamma));
            out.push((format!("gat{i}.ln_beta"), &g.ln_beta));
        }
        out.push(("lane_bias".into(), &self.lane_bias));
        for (h, d) in Horizon::ALL.iter().zip(&self.decoders) {
            out.push((format!("dec_{}.w1", h.label()), &d.hidden.w));
            out.push((format!("dec_{}.b1", h.label()), &d.hidden.b));
            out.push((format!("dec_{}.w2", h.label()), &d.out.w));
            out.push((format!("dec_{}.b2", h.label()), &d.out.b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        let enc = &mut self.encoder;
        for (dir, l) in [("fwd", &mut enc.fwd), ("bwd", &mut enc.bwd)] {
            out.push((format!("encoder.{dir}.w_ih"), &mut l.w_ih));
            out.push((format!("encoder.{dir}.w_hh"), &mut l.w_hh));
            out.push((format!("encoder.{dir}.b"), &mut l.b));
        }
        out.push(("encoder.proj.w".into(), &mut enc.proj.w));
        out.push(("encoder.proj.b".into(), &mut enc.proj.b));
        for (i, g) in self.gat.iter_mut().enumerate() {
            out.push((format!("gat{i}.w"), &mut g.w));
            out.push((format!("gat{i}.att_dst"), &mut g.att_dst));
            out.push((format!("gat{i}.att_src"), &mut g.att_src));
            out.push((format!("gat{i}.att_edge"), &mut g.att_edge));
            out.push((format!("gat{i}.w_edge"), &mut g.w_edge));
            out.push((format!("gat{i}.ln_gamma"), &mut g.ln_gamma));
            out.push((format!("gat{i}.ln_beta"), &mut g.ln_beta));
        }
        out.push(("lane_bias".into(), &mut self.lane_bias));
        for (h, d) in Horizon::ALL.iter().zip(self.decoders.iter_mut()) {
            out.push((format!("dec_{}.w1", h.label()), &mut d.hidden.w));
            out.push((format!("dec_{}.b1", h.label()), &mut d.hidden.b));
            out.push((format!("dec_{}.w2", h.label()), &mut d.out.w));
            out.push((format!("dec_{}.b2", h.label()), &mut d.out.b));
        }
        out
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn lambda(&self) -> [f64; LANE_CODES] {
        let mut out = [0.0; LANE_CODES];
        out.copy_from_slice(&self.lane_bias.data);
        out
    }

    /// Total element count.
    pub fn flat_len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Named parameters with gradient accumulators and frozen flags.
#[derive(Clone, Debug)]
pub struct ParamStore {
    pub config: ModelConfig,
    pub params: Params,
    pub grads: Params,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new(config: ModelConfig, params: Params) -> Self {
        let grads = params.zeros_like();
        Self {
            config,
            params,
            grads,
            frozen: BTreeSet::new(),
        }
    }

    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let params = Params::init(&config, seed);
        Self::new(config, params)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(name.to_string());
        } else {
            self.frozen.remove(name);
        }
    }

    /// Freezes every tensor of the history encoder.
    pub fn freeze_encoder(&mut self) {
        let names: Vec<String> = self
            .params
            .tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with(ENCODER_PREFIX))
            .collect();
        self.frozen.extend(names);
    }

    pub fn encoder_frozen(&self) -> bool {
        self.params
            .tensors()
            .iter()
            .filter(|(n, _)| n.starts_with(ENCODER_PREFIX))
            .all(|(n, _)| self.frozen.contains(n))
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.grads.tensors_mut() {
            t.fill_zero();
        }
    }

    /// Element count over tensors that are not frozen.
    pub fn count_parameters(&self) -> usize {
        count_trainable(&self.params, &self.frozen)
    }
}

pub fn count_trainable(params: &Params, frozen: &BTreeSet<String>) -> usize {
    params
        .tensors()
        .iter()
        .filter(|(n, _)| !frozen.contains(n))
        .map(|(_, t)| t.len())
        .sum()
}
