//! Full forward and backward pass over one scene.

use std::collections::BTreeSet;

use super::decoder::{DecoderCache, GaussianRow, RowGrad};
use super::gat::{apply_lane_bias, lane_code, GatCache, GatEdge};
use super::lstm::EncoderCache;
use super::params::Params;
use super::standardize::Standardizer;
use crate::error::{Error, Result};
use crate::graph::{GraphSequence, SceneGraph, EDGE_FEATURES};
use crate::trajectory::{Horizon, VehicleId, NODE_FEATURES};

/// Standardised model input: one history per node and the anchor edges.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInput {
    pub histories: Vec<Vec<[f64; NODE_FEATURES]>>,
    pub edges: Vec<InputEdge>,
}

/// Edge `src -> dst` with standardised features and the raw lane code last.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputEdge {
    pub src: usize,
    pub dst: usize,
    pub feature: [f64; EDGE_FEATURES],
}

/// Gaussian rows for every horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub horizons: Vec<Vec<GaussianRow>>,
}

impl Prediction {
    pub fn horizon(&self, h: Horizon) -> &[GaussianRow] {
        &self.horizons[h.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Inference,
    /// Keep what backward needs; `encoder_grad` also keeps LSTM state.
    Train { encoder_grad: bool },
}

/// Forward results and saved activations.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Aligned with the requested decode nodes.
    pub predictions: Vec<Prediction>,
    pub decode_nodes: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
    pub gat: Vec<GatCache>,
    edge_codes: Vec<usize>,
    encoder: Option<Vec<EncoderCache>>,
    decoders: Vec<Vec<DecoderCache>>,
}

/// Runs encoder, attention layers and decoders. Only `decode_nodes` are
/// decoded.
pub fn forward(params: &Params, scene: &SceneInput, decode_nodes: &[usize], mode: Mode) -> Result<ForwardPass> {
    let n = scene.histories.len();
    if let Some(&bad) = decode_nodes.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("decode node {bad} outside scene of {n} nodes")));
    }
    let keep_encoder = matches!(mode, Mode::Train { encoder_grad: true });
    let mut embeddings = Vec::with_capacity(n);
    let mut enc_caches = Vec::new();
    for h in &scene.histories {
        if keep_encoder {
            let (e, c) = params.encoder.encode_cached(h)?;
            embeddings.push(e);
            enc_caches.push(c);
        } else {
            embeddings.push(params.encoder.encode(h)?);
        }
    }

    let lambda = &params.lane_bias.data;
    let mut edges = Vec::with_capacity(scene.edges.len());
    let mut edge_codes = Vec::with_capacity(scene.edges.len());
    for e in &scene.edges {
        if e.src >= n || e.dst >= n {
            return Err(Error::invalid("edge endpoint outside scene"));
        }
        edge_codes.push(lane_code(&e.feature)?);
        edges.push(GatEdge {
            src: e.src,
            dst: e.dst,
            feature: apply_lane_bias(&e.feature, lambda)?,
        });
    }
    let self_feature = apply_lane_bias(&[0.0; EDGE_FEATURES], lambda)?;

    let mut gat = Vec::with_capacity(params.gat.len());
    let mut x = embeddings.clone();
    for layer in &params.gat {
        let cache = layer.forward(&x, &edges, &self_feature);
        x = cache.out.clone();
        gat.push(cache);
    }

    let mut predictions = Vec::with_capacity(decode_nodes.len());
    let mut decoders = Vec::new();
    for &i in decode_nodes {
        let mut horizons = Vec::with_capacity(params.decoders.len());
        let mut caches = Vec::with_capacity(params.decoders.len());
        for dec in &params.decoders {
            let (rows, cache) = dec.forward(&x[i]);
            horizons.push(rows);
            caches.push(cache);
        }
        predictions.push(Prediction { horizons });
        if mode != Mode::Inference {
            decoders.push(caches);
        }
    }

    Ok(ForwardPass {
        predictions,
        decode_nodes: decode_nodes.to_vec(),
        embeddings,
        gat,
        edge_codes,
        encoder: keep_encoder.then_some(enc_caches),
        decoders,
    })
}

/// Accumulates into `grads` the gradient of a scalar whose partials with
/// respect to every predicted row are `d_rows[decode node][horizon][step]`.
///
/// Encoder gradients are produced only when the pass kept encoder state.
pub fn backward(params: &Params, pass: &ForwardPass, d_rows: &[Vec<Vec<RowGrad>>], grads: &mut Params) {
    assert!(!pass.decoders.is_empty() || pass.decode_nodes.is_empty(), "forward ran in inference mode");
    let n = pass.embeddings.len();
    let width = pass.gat.last().map_or(pass.embeddings[0].len(), |c| c.out[0].len());
    let mut d_x = vec![vec![0.0; width]; n];
    for ((&node, caches), d_node) in pass.decode_nodes.iter().zip(&pass.decoders).zip(d_rows) {
        for ((dec, cache), (g, d)) in params
            .decoders
            .iter()
            .zip(caches)
            .zip(grads.decoders.iter_mut().zip(d_node))
        {
            let dh = dec.backward(cache, d, g);
            for (a, b) in d_x[node].iter_mut().zip(&dh) {
                *a += b;
            }
        }
    }

    for ((layer, cache), g) in params.gat.iter().zip(&pass.gat).zip(grads.gat.iter_mut()).rev() {
        let (dx, d_edges, d_self) = layer.backward(cache, &d_x, g);
        for (code, de) in pass.edge_codes.iter().zip(&d_edges) {
            grads.lane_bias.data[*code] += de[EDGE_FEATURES - 1];
        }
        grads.lane_bias.data[0] += d_self[EDGE_FEATURES - 1];
        d_x = dx;
    }

    if let Some(enc) = &pass.encoder {
        for (cache, d) in enc.iter().zip(&d_x) {
            params.encoder.backward(cache, d, &mut grads.encoder);
        }
    }
}

/// Anchor-graph nodes reachable from `seeds` within `hops` steps against
/// edge direction, sorted.
pub fn k_hop_nodes(graph: &SceneGraph, seeds: &[usize], hops: usize) -> Vec<usize> {
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); graph.nodes.len()];
    for e in &graph.edges {
        incoming[e.dst].push(e.src);
    }
    let mut seen: BTreeSet<usize> = seeds.iter().copied().collect();
    let mut frontier: Vec<usize> = seen.iter().copied().collect();
    for _ in 0..hops {
        let mut next = Vec::new();
        for &i in &frontier {
            for &j in &incoming[i] {
                if seen.insert(j) {
                    next.push(j);
                }
            }
        }
        frontier = next;
    }
    seen.into_iter().collect()
}

/// Model input restricted to a subset of anchor-graph nodes.
#[derive(Clone, Debug)]
pub struct SceneView {
    pub input: SceneInput,
    /// Anchor-graph index of each scene node.
    pub nodes: Vec<usize>,
}

impl SceneView {
    /// Scene-local index of a vehicle.
    pub fn local_index(&self, anchor: &SceneGraph, id: VehicleId) -> Result<usize> {
        let global = anchor
            .node_index(id)
            .ok_or_else(|| Error::invalid(format!("vehicle {id} absent from anchor graph")))?;
        self.nodes
            .binary_search(&global)
            .map_err(|_| Error::invalid(format!("vehicle {id} outside the selected subgraph")))
    }
}

/// Builds standardised input for the induced subgraph on `nodes` (all
/// anchor nodes when `None`).
pub fn scene_view(seq: &GraphSequence, stats: &Standardizer, nodes: Option<&[usize]>) -> SceneView {
    let anchor = seq.anchor();
    let nodes: Vec<usize> = match nodes {
        Some(ns) => ns.to_vec(),
        None => (0..anchor.nodes.len()).collect(),
    };
    let mut local = vec![usize::MAX; anchor.nodes.len()];
    for (l, &g) in nodes.iter().enumerate() {
        local[g] = l;
    }
    let all = seq.node_histories();
    let histories = nodes
        .iter()
        .map(|&g| all[g].iter().map(|f| stats.node(f)).collect())
        .collect();
    let edges = anchor
        .edges
        .iter()
        .filter(|e| local[e.src] != usize::MAX && local[e.dst] != usize::MAX)
        .map(|e| InputEdge {
            src: local[e.src],
            dst: local[e.dst],
            feature: stats.edge(&e.feature.to_array()),
        })
        .collect();
    SceneView {
        input: SceneInput { histories, edges },
        nodes,
    }
}

/// Predictions for every target vehicle of a sequence, in
/// `target_vehicles` order.
pub fn predict_targets(params: &Params, stats: &Standardizer, seq: &GraphSequence) -> Result<Vec<Prediction>> {
    let view = scene_view(seq, stats, None);
    let anchor = seq.anchor();
    let targets = seq
        .target_vehicles
        .iter()
        .map(|&id| view.local_index(anchor, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(forward(params, &view.input, &targets, Mode::Inference)?.predictions)
}
