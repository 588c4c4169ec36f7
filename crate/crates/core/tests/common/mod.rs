//! Shared fixtures and independent oracles for integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use lagat::eval::{PairOutcome, PredictedTrack, SsmConfig, SsmCounts};
use lagat::graph::{build_sequences, GraphParams, SceneGraph, SceneSequence};
use lagat::nn::decoder::GaussianRow;
use lagat::nn::gat::{GatEdge, GatLayer};
use lagat::nn::lstm::{Encoder, Lstm};
use lagat::nn::model::{backward, forward, InputEdge, Mode, SceneInput};
use lagat::nn::{Decoder, ModelConfig, Params, Standardizer, Tensor};
use lagat::synth::{generate, ScenarioSpec};
use lagat::train::nll;
use lagat::train::run::{fit_standardizer, group_pass, SampleSet};
use lagat::trajectory::{Dataset, VehicleId, VehicleState, FRAME_DT, NODE_FEATURES};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const BLOCK_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn randomize(t: &mut Tensor, rng: &mut ChaCha8Rng, scale: f64) {
    for v in &mut t.data {
        *v = rng.gen_range(-scale..scale);
    }
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel: f64,
    pub checked: usize,
}

/// Compares `analytic[k]` against a central difference of `loss` along
/// coordinate `k` of `coords(state)`, for every `k` in `indices`.
pub fn check<S: Clone>(
    name: &'static str,
    state: &S,
    coords: fn(&mut S) -> Vec<&mut f64>,
    loss: impl Fn(&S) -> f64,
    analytic: &[f64],
    indices: &[usize],
) -> GradCheck {
    let mut max_rel: f64 = 0.0;
    for &k in indices {
        let mut plus = state.clone();
        *coords(&mut plus)[k] += FD_STEP;
        let mut minus = state.clone();
        *coords(&mut minus)[k] -= FD_STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        max_rel = max_rel.max(rel_err(analytic[k], numeric));
    }
    GradCheck {
        name,
        max_rel,
        checked: indices.len(),
    }
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn tensor_coords<'a>(ts: impl IntoIterator<Item = &'a mut Tensor>) -> Vec<&'a mut f64> {
    ts.into_iter().flat_map(|t| t.data.iter_mut()).collect()
}

fn tensor_values<'a>(ts: impl IntoIterator<Item = &'a Tensor>) -> Vec<f64> {
    ts.into_iter().flat_map(|t| t.data.iter().copied()).collect()
}

// ---- LSTM cell ----

#[derive(Clone)]
pub struct CellState {
    lstm: Lstm,
    x: Vec<f64>,
    h: Vec<f64>,
    c: Vec<f64>,
    coef_h: Vec<f64>,
    coef_c: Vec<f64>,
}

fn cell_coords(s: &mut CellState) -> Vec<&mut f64> {
    let mut v = tensor_coords([&mut s.lstm.w_ih, &mut s.lstm.w_hh, &mut s.lstm.b]);
    v.extend(s.x.iter_mut().chain(s.h.iter_mut()).chain(s.c.iter_mut()));
    v
}

fn cell_loss(s: &CellState) -> f64 {
    let out = s.lstm.cell_forward(&s.x, &s.h, &s.c);
    dot(&s.coef_h, &out.h) + dot(&s.coef_c, &out.c)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn lstm_cell_check(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut lstm = Lstm::zeros(3, 4);
    for t in [&mut lstm.w_ih, &mut lstm.w_hh, &mut lstm.b] {
        randomize(t, &mut r, 0.8);
    }
    let s = CellState {
        lstm,
        x: random_vec(&mut r, 3, 1.0),
        h: random_vec(&mut r, 4, 1.0),
        c: random_vec(&mut r, 4, 1.0),
        coef_h: random_vec(&mut r, 4, 1.0),
        coef_c: random_vec(&mut r, 4, 1.0),
    };
    let cache = s.lstm.cell_forward(&s.x, &s.h, &s.c);
    let mut grad = Lstm::zeros(3, 4);
    let (dx, dh, dc) = s.lstm.cell_backward(&cache, &s.coef_h, &s.coef_c, &mut grad);
    let mut analytic = tensor_values([&grad.w_ih, &grad.w_hh, &grad.b]);
    analytic.extend(dx.iter().chain(&dh).chain(&dc));
    check("LSTM cell", &s, cell_coords, cell_loss, &analytic, &all(analytic.len()))
}

// ---- BiLSTM encoder ----

#[derive(Clone)]
pub struct EncoderState {
    enc: Encoder,
    history: Vec<[f64; NODE_FEATURES]>,
    coef: Vec<f64>,
}

fn encoder_coords(s: &mut EncoderState) -> Vec<&mut f64> {
    let e = &mut s.enc;
    tensor_coords([
        &mut e.fwd.w_ih,
        &mut e.fwd.w_hh,
        &mut e.fwd.b,
        &mut e.bwd.w_ih,
        &mut e.bwd.w_hh,
        &mut e.bwd.b,
        &mut e.proj.w,
        &mut e.proj.b,
    ])
}

fn encoder_loss(s: &EncoderState) -> f64 {
    dot(&s.coef, &s.enc.encode(&s.history).unwrap())
}

pub fn encoder_check(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut s = EncoderState {
        enc: Encoder::zeros(NODE_FEATURES, 3, 4),
        history: (0..8)
            .map(|_| {
                let v = random_vec(&mut r, NODE_FEATURES, 1.0);
                v.try_into().unwrap()
            })
            .collect(),
        coef: random_vec(&mut r, 4, 1.0),
    };
    for t in encoder_coords_tensors(&mut s.enc) {
        randomize(t, &mut r, 0.6);
    }
    let (_, cache) = s.enc.encode_cached(&s.history).unwrap();
    let mut grad = Encoder::zeros(NODE_FEATURES, 3, 4);
    s.enc.backward(&cache, &s.coef, &mut grad);
    let g = &grad;
    let analytic = tensor_values([
        &g.fwd.w_ih,
        &g.fwd.w_hh,
        &g.fwd.b,
        &g.bwd.w_ih,
        &g.bwd.w_hh,
        &g.bwd.b,
        &g.proj.w,
        &g.proj.b,
    ]);
    check("BiLSTM encoder", &s, encoder_coords, encoder_loss, &analytic, &all(analytic.len()))
}

fn encoder_coords_tensors(e: &mut Encoder) -> [&mut Tensor; 8] {
    [
        &mut e.fwd.w_ih,
        &mut e.fwd.w_hh,
        &mut e.fwd.b,
        &mut e.bwd.w_ih,
        &mut e.bwd.w_hh,
        &mut e.bwd.b,
        &mut e.proj.w,
        &mut e.proj.b,
    ]
}

// ---- GAT attention score ----

pub fn random_gat(r: &mut ChaCha8Rng, in_dim: usize, heads: usize, head_dim: usize) -> GatLayer {
    let mut l = GatLayer::zeros(in_dim, heads, head_dim);
    for t in [&mut l.w, &mut l.att_dst, &mut l.att_src, &mut l.att_edge, &mut l.w_edge, &mut l.ln_beta] {
        randomize(t, r, 0.8);
    }
    for g in &mut l.ln_gamma.data {
        *g = 1.0 + r.gen_range(-0.3..0.3);
    }
    l
}

#[derive(Clone)]
pub struct ScoreState {
    layer: GatLayer,
    h_i: Vec<f64>,
    h_j: Vec<f64>,
    e: [f64; 5],
}

fn score_coords(s: &mut ScoreState) -> Vec<&mut f64> {
    let l = &mut s.layer;
    let mut v = tensor_coords([&mut l.w, &mut l.att_dst, &mut l.att_src, &mut l.att_edge, &mut l.w_edge]);
    v.extend(s.h_i.iter_mut().chain(s.h_j.iter_mut()).chain(s.e.iter_mut()));
    v
}

pub fn attention_score_check(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let s = ScoreState {
        layer: random_gat(&mut r, 5, 2, 3),
        h_i: random_vec(&mut r, 5, 1.0),
        h_j: random_vec(&mut r, 5, 1.0),
        e: random_vec(&mut r, 5, 1.0).try_into().unwrap(),
    };
    let mut worst = GradCheck {
        name: "GAT attention score",
        max_rel: 0.0,
        checked: 0,
    };
    for head in 0..2 {
        let mut grad = GatLayer::zeros(5, 2, 3);
        let (dh_i, dh_j, de) = s.layer.attention_score_backward(head, &s.h_i, &s.h_j, &s.e, 1.0, &mut grad);
        let mut analytic = tensor_values([&grad.w, &grad.att_dst, &grad.att_src, &grad.att_edge, &grad.w_edge]);
        analytic.extend(dh_i.iter().chain(&dh_j).chain(&de));
        let c = check(
            "GAT attention score",
            &s,
            score_coords,
            |s| s.layer.attention_score(head, &s.h_i, &s.h_j, &s.e),
            &analytic,
            &all(analytic.len()),
        );
        worst.max_rel = worst.max_rel.max(c.max_rel);
        worst.checked += c.checked;
    }
    worst
}

// ---- GAT layer ----

/// Random directed edges without self-loops or duplicates.
pub fn random_edges(r: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for dst in 0..n {
        for src in 0..n {
            if src != dst && r.gen_bool(p) {
                out.push((src, dst));
            }
        }
    }
    out
}

#[derive(Clone)]
pub struct LayerState {
    layer: GatLayer,
    x: Vec<Vec<f64>>,
    edges: Vec<GatEdge>,
    self_feature: [f64; 5],
    coef: Vec<Vec<f64>>,
}

fn layer_coords(s: &mut LayerState) -> Vec<&mut f64> {
    let l = &mut s.layer;
    let mut v = tensor_coords([
        &mut l.w,
        &mut l.att_dst,
        &mut l.att_src,
        &mut l.att_edge,
        &mut l.w_edge,
        &mut l.ln_gamma,
        &mut l.ln_beta,
    ]);
    v.extend(s.x.iter_mut().flatten());
    v.extend(s.edges.iter_mut().flat_map(|e| e.feature.iter_mut()));
    v.extend(s.self_feature.iter_mut());
    v
}

fn layer_loss(s: &LayerState) -> f64 {
    let out = s.layer.forward(&s.x, &s.edges, &s.self_feature).out;
    out.iter().zip(&s.coef).map(|(o, c)| dot(o, c)).sum()
}

pub fn gat_layer_check(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let (n, in_dim, heads, head_dim) = (5, 4, 2, 3);
    let layer = random_gat(&mut r, in_dim, heads, head_dim);
    let edges = random_edges(&mut r, n, 0.5)
        .into_iter()
        .map(|(src, dst)| GatEdge {
            src,
            dst,
            feature: random_vec(&mut r, 5, 1.0).try_into().unwrap(),
        })
        .collect();
    let s = LayerState {
        layer,
        x: (0..n).map(|_| random_vec(&mut r, in_dim, 1.0)).collect(),
        edges,
        self_feature: random_vec(&mut r, 5, 1.0).try_into().unwrap(),
        coef: (0..n).map(|_| random_vec(&mut r, heads * head_dim, 1.0)).collect(),
    };
    let cache = s.layer.forward(&s.x, &s.edges, &s.self_feature);
    let mut grad = GatLayer::zeros(in_dim, heads, head_dim);
    let (dx, d_edges, d_self) = s.layer.backward(&cache, &s.coef, &mut grad);
    let mut analytic = tensor_values([
        &grad.w,
        &grad.att_dst,
        &grad.att_src,
        &grad.att_edge,
        &grad.w_edge,
        &grad.ln_gamma,
        &grad.ln_beta,
    ]);
    analytic.extend(dx.iter().flatten());
    analytic.extend(d_edges.iter().flatten());
    analytic.extend(d_self.iter());
    check("GAT layer", &s, layer_coords, layer_loss, &analytic, &all(analytic.len()))
}

// ---- Decoder ----

#[derive(Clone)]
pub struct DecoderState {
    dec: Decoder,
    h: Vec<f64>,
    coef: Vec<[f64; 5]>,
}

fn decoder_coords(s: &mut DecoderState) -> Vec<&mut f64> {
    let d = &mut s.dec;
    let mut v = tensor_coords([&mut d.hidden.w, &mut d.hidden.b, &mut d.out.w, &mut d.out.b]);
    v.extend(s.h.iter_mut());
    v
}

fn row_values(r: &GaussianRow) -> [f64; 5] {
    [r.mu_x, r.mu_y, r.log_sigma_x, r.log_sigma_y, r.rho]
}

fn decoder_loss(s: &DecoderState) -> f64 {
    let (rows, _) = s.dec.forward(&s.h);
    rows.iter().zip(&s.coef).map(|(r, c)| dot(&row_values(r), c)).sum()
}

pub fn decoder_check(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut dec = Decoder::zeros(4, 5, 3);
    for t in [&mut dec.hidden.w, &mut dec.hidden.b, &mut dec.out.w, &mut dec.out.b] {
        randomize(t, &mut r, 0.8);
    }
    let s = DecoderState {
        dec,
        h: random_vec(&mut r, 4, 1.0),
        coef: (0..3).map(|_| random_vec(&mut r, 5, 1.0).try_into().unwrap()).collect(),
    };
    let (_, cache) = s.dec.forward(&s.h);
    let mut grad = Decoder::zeros(4, 5, 3);
    let dh = s.dec.backward(&cache, &s.coef, &mut grad);
    let mut analytic = tensor_values([&grad.hidden.w, &grad.hidden.b, &grad.out.w, &grad.out.b]);
    analytic.extend(dh);
    check("decoder", &s, decoder_coords, decoder_loss, &analytic, &all(analytic.len()))
}

// ---- NLL ----

#[derive(Clone)]
pub struct NllState {
    row: [f64; 5],
    target: [f64; 2],
}

fn nll_coords(s: &mut NllState) -> Vec<&mut f64> {
    s.row.iter_mut().collect()
}

fn to_row(v: &[f64; 5]) -> GaussianRow {
    GaussianRow {
        mu_x: v[0],
        mu_y: v[1],
        log_sigma_x: v[2],
        log_sigma_y: v[3],
        rho: v[4],
    }
}

pub fn nll_check(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut worst = GradCheck {
        name: "NLL loss",
        max_rel: 0.0,
        checked: 0,
    };
    for _ in 0..50 {
        let s = NllState {
            row: [
                r.gen_range(-3.0..3.0),
                r.gen_range(-3.0..3.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-0.9..0.9),
            ],
            target: [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)],
        };
        let (_, g) = nll(&to_row(&s.row), s.target).unwrap();
        let c = check("NLL loss", &s, nll_coords, |s| nll(&to_row(&s.row), s.target).unwrap().0, &g, &all(5));
        worst.max_rel = worst.max_rel.max(c.max_rel);
        worst.checked += c.checked;
    }
    worst
}

// ---- Full model ----

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        lstm_hidden: 3,
        heads: 2,
        head_dim: 2,
        decoder_hidden: 4,
        ..ModelConfig::default()
    }
}

/// A scene whose edges carry every lane code.
pub fn random_scene(r: &mut ChaCha8Rng, n: usize, steps: usize) -> SceneInput {
    let histories = (0..n)
        .map(|_| {
            (0..steps)
                .map(|_| random_vec(r, NODE_FEATURES, 1.0).try_into().unwrap())
                .collect()
        })
        .collect();
    let edges = random_edges(r, n, 0.6)
        .into_iter()
        .enumerate()
        .map(|(k, (src, dst))| {
            let mut feature: [f64; 5] = random_vec(r, 5, 1.0).try_into().unwrap();
            feature[4] = (k % 4) as f64;
            InputEdge { src, dst, feature }
        })
        .collect();
    SceneInput { histories, edges }
}

#[derive(Clone)]
pub struct ModelState {
    params: Params,
    scene: SceneInput,
    coef: Vec<Vec<Vec<[f64; 5]>>>,
}

fn lane_bias_coords(s: &mut ModelState) -> Vec<&mut f64> {
    s.params.lane_bias.data.iter_mut().collect()
}

fn model_output_loss(s: &ModelState) -> f64 {
    let decode: Vec<usize> = (0..s.scene.histories.len()).collect();
    let pass = forward(&s.params, &s.scene, &decode, Mode::Inference).unwrap();
    let mut total = 0.0;
    for (p, cp) in pass.predictions.iter().zip(&s.coef) {
        for (rows, ch) in p.horizons.iter().zip(cp) {
            for (row, c) in rows.iter().zip(ch) {
                total += dot(&row_values(row), c);
            }
        }
    }
    total
}

/// Gradient of the lane-bias vector through attention, including the
/// self-loop feature.
pub fn lane_bias_check(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut params = Params::init(&tiny_config(), seed);
    randomize(&mut params.lane_bias, &mut r, 1.0);
    let scene = random_scene(&mut r, 5, 6);
    let coef = (0..5)
        .map(|_| {
            params
                .decoders
                .iter()
                .map(|d| (0..d.steps()).map(|_| random_vec(&mut r, 5, 1.0).try_into().unwrap()).collect())
                .collect()
        })
        .collect();
    let s = ModelState { params, scene, coef };
    let decode: Vec<usize> = (0..5).collect();
    let pass = forward(&s.params, &s.scene, &decode, Mode::Train { encoder_grad: true }).unwrap();
    let mut grads = s.params.zeros_like();
    backward(&s.params, &pass, &s.coef, &mut grads);
    check(
        "lane bias",
        &s,
        lane_bias_coords,
        model_output_loss,
        &grads.lane_bias.data,
        &all(4),
    )
}

/// Small merge scenario long enough for a handful of anchors.
pub fn merge_dataset(vehicles: usize, duration: f64, seed: u64) -> Dataset {
    generate(&ScenarioSpec {
        vehicles,
        duration,
        seed,
        lanes: 3,
        merge_lane_ids: BTreeSet::from([3]),
        merge_window: [1.0, 4.0],
        road_length: 400.0,
        ..ScenarioSpec::default()
    })
    .unwrap()
}

#[derive(Clone)]
pub struct TrainState {
    params: Params,
}

fn param_coords(s: &mut TrainState) -> Vec<&mut f64> {
    s.params.tensors_mut().into_iter().flat_map(|(_, t)| t.data.iter_mut()).collect()
}

/// Combined training loss of one sequence against a random 100-coordinate
/// subsample of every parameter.
pub fn end_to_end_check(seed: u64, lambda2: f64) -> GradCheck {
    let ds = merge_dataset(9, 8.0, seed);
    let graph = GraphParams::new(40.0, ds.merge_lane_ids.clone());
    let seqs = build_sequences(&ds, &graph, 100);
    let seq: &SceneSequence = &seqs[0];
    let set = SampleSet {
        sequences: vec![seq.clone()],
        samples: (0..seq.windows.len()).map(|w| (0, w)).collect(),
    };
    let stats = fit_standardizer(&set);
    let windows: Vec<usize> = (0..seq.windows.len()).collect();
    let state = TrainState {
        params: Params::init(&tiny_config(), seed),
    };
    let (_, g) = group_pass(&state.params, &stats, seq, &windows, lambda2, Some(true)).unwrap();
    let analytic: Vec<f64> = g.unwrap().tensors().into_iter().flat_map(|(_, t)| t.data.clone()).collect();
    let mut r = rng(seed ^ 0x5eed);
    let indices: Vec<usize> = rand::seq::index::sample(&mut r, analytic.len(), 100).into_vec();
    check(
        "end-to-end",
        &state,
        param_coords,
        |s| group_pass(&s.params, &stats, seq, &windows, lambda2, None).unwrap().0.combined,
        &analytic,
        &indices,
    )
}

// ---- Scene oracles ----

pub fn random_states(r: &mut ChaCha8Rng, n: usize, lanes: u32) -> Vec<VehicleState> {
    let mut ids: Vec<VehicleId> = (1..=3 * n as VehicleId).collect();
    ids.shuffle(r);
    let ids = &ids[..n];
    let pick = |r: &mut ChaCha8Rng| -> Option<VehicleId> {
        match r.gen_range(0..4) {
            0 => None,
            1 => Some(1000 + r.gen_range(0..5)),
            _ => Some(ids[r.gen_range(0..n)]),
        }
    };
    (0..n)
        .map(|k| {
            let lane = r.gen_range(1..=lanes);
            VehicleState {
                vehicle_id: ids[k],
                frame: 7,
                t: 0.7,
                x: if r.gen_bool(0.2) { r.gen_range(0..60) as f64 } else { r.gen_range(0.0..300.0) },
                y: (lane as f64 - 0.5) * 3.5 + r.gen_range(-0.5..0.5),
                v: if r.gen_bool(0.2) { 20.0 } else { r.gen_range(0.0..35.0) },
                a: r.gen_range(-2.0..2.0),
                lane_id: lane,
                lane_norm: lane as f64 / lanes as f64,
                lane_change: r.gen_bool(0.1),
                leader_id: pick(r),
                follower_id: pick(r),
                space_headway: None,
            }
        })
        .collect()
}

/// Lane code of `j` seen from `i` with lower index on the left.
pub fn oracle_relation(li: u32, lj: u32, merge: &BTreeSet<u32>) -> usize {
    let mi = merge.contains(&li);
    let mj = merge.contains(&lj);
    let diff = (li as i64 - lj as i64).abs();
    if mi != mj && diff <= 1 {
        3
    } else if li == lj {
        0
    } else if lj < li {
        1
    } else {
        2
    }
}

pub fn oracle_ttc(dx: f64, closing: f64) -> f64 {
    if dx > 0.0 && closing > 0.0 {
        let t = dx / closing;
        if t > 999.0 {
            999.0
        } else {
            t
        }
    } else {
        999.0
    }
}

/// `(src id, dst id) -> ([dx, dy, dv, ttc, r], mandatory)` by enumerating
/// every ordered pair.
pub type EdgeMap = BTreeMap<(VehicleId, VehicleId), ([f64; 5], bool)>;

pub fn oracle_edges(states: &[VehicleState], rmax: f64, merge: &BTreeSet<u32>) -> EdgeMap {
    let mut out = BTreeMap::new();
    for si in states {
        for sj in states {
            if si.vehicle_id == sj.vehicle_id {
                continue;
            }
            let dx = sj.x - si.x;
            let dy = sj.y - si.y;
            let proximity = (dx * dx + dy * dy).sqrt() <= rmax;
            let linked = [si.leader_id, si.follower_id].contains(&Some(sj.vehicle_id))
                || [sj.leader_id, sj.follower_id].contains(&Some(si.vehicle_id));
            let adjacent = si.lane_id.abs_diff(sj.lane_id) == 1 && (si.x - sj.x).abs() <= 10.0;
            if !(proximity || linked || adjacent) {
                continue;
            }
            let dv = sj.v - si.v;
            let feature = [dx, dy, dv, oracle_ttc(dx, si.v - sj.v), oracle_relation(si.lane_id, sj.lane_id, merge) as f64];
            out.insert((sj.vehicle_id, si.vehicle_id), (feature, linked || adjacent));
        }
    }
    out
}

pub fn graph_edges(g: &SceneGraph) -> EdgeMap {
    g.edges
        .iter()
        .map(|e| ((g.nodes[e.src], g.nodes[e.dst]), (e.feature.to_array(), e.mandatory)))
        .collect()
}

/// Random predicted tracks moving roughly along the carriageway.
pub fn random_tracks(r: &mut ChaCha8Rng, n: usize, steps: usize) -> Vec<PredictedTrack> {
    let mut ids: Vec<VehicleId> = (1..=4 * n as VehicleId).collect();
    ids.shuffle(r);
    (0..n)
        .map(|k| {
            let anchor = [r.gen_range(0.0..80.0), r.gen_range(0.0..10.0)];
            let mut p = anchor;
            let v = r.gen_range(0.0..30.0);
            let positions = (0..steps)
                .map(|_| {
                    p[0] += (v + r.gen_range(-8.0..8.0)) * FRAME_DT;
                    p[1] += r.gen_range(-0.3..0.3);
                    p
                })
                .collect();
            PredictedTrack {
                vehicle_id: ids[k],
                anchor,
                positions,
            }
        })
        .collect()
}

/// Pair-step enumeration of the conflict measures.
pub fn oracle_outcome(ego: &PredictedTrack, other: &PredictedTrack) -> PairOutcome {
    let mut min_ttc: f64 = 999.0;
    let mut max_drac: f64 = 0.0;
    let mut min_dist = f64::INFINITY;
    let steps = ego.positions.len().min(other.positions.len());
    for k in 0..steps {
        let prev_e = if k == 0 { ego.anchor[0] } else { ego.positions[k - 1][0] };
        let prev_o = if k == 0 { other.anchor[0] } else { other.positions[k - 1][0] };
        let ve = (ego.positions[k][0] - prev_e) / FRAME_DT;
        let vo = (other.positions[k][0] - prev_o) / FRAME_DT;
        let gap = other.positions[k][0] - ego.positions[k][0];
        let closing = ve - vo;
        min_ttc = min_ttc.min(oracle_ttc(gap, closing));
        if gap > 0.0 && closing > 0.0 {
            max_drac = max_drac.max(closing * closing / (2.0 * gap));
        }
        let dx = ego.positions[k][0] - other.positions[k][0];
        let dy = ego.positions[k][1] - other.positions[k][1];
        min_dist = min_dist.min((dx * dx + dy * dy).sqrt());
    }
    PairOutcome {
        ego: ego.vehicle_id,
        other: other.vehicle_id,
        min_ttc,
        max_drac,
        min_dist,
    }
}

pub fn oracle_counts(tracks: &[PredictedTrack], pairs: &[(usize, usize)], cfg: &SsmConfig) -> SsmCounts {
    let mut c = SsmCounts {
        pairs: pairs.len(),
        ..Default::default()
    };
    let mut involved = BTreeSet::new();
    let mut colliding = BTreeSet::new();
    for &(i, j) in pairs {
        let o = oracle_outcome(&tracks[i], &tracks[j]);
        involved.extend([o.ego, o.other]);
        c.ttc_violations += usize::from(o.min_ttc < cfg.ttc_threshold);
        c.drac_exceedances += usize::from(o.max_drac > cfg.drac_threshold);
        if o.min_dist < cfg.collision_distance {
            c.collisions += 1;
            colliding.extend([o.ego, o.other]);
        }
    }
    c.vehicles = involved.len();
    c.colliding_vehicles = colliding.len();
    c
}

/// Identity statistics, used where standardisation is irrelevant.
pub fn identity_stats() -> Standardizer {
    Standardizer::identity()
}

/// Training-set ADE over the first horizon, in metres.
pub fn train_ade_1s(params: &Params, stats: &Standardizer, set: &SampleSet) -> f64 {
    let mut total = 0.0;
    for seq in &set.sequences {
        let preds = lagat::nn::predict_targets(params, stats, &seq.sequence).unwrap();
        for (p, w) in preds.iter().zip(&seq.windows) {
            let means: Vec<[f64; 2]> = p.horizons[0].iter().map(|r| r.mean()).collect();
            total += lagat::eval::ade(&means, &w.target(lagat::trajectory::Horizon::S1).steps);
        }
    }
    total / set.len() as f64
}

/// Scene used by the overfit check: merges begin after the first
/// horizon, so they appear in the 3 s and 5 s targets.
pub fn overfit_scenario() -> ScenarioSpec {
    ScenarioSpec {
        vehicles: 20,
        duration: 8.0,
        seed: 42,
        merge_window: [4.0, 5.0],
        ..ScenarioSpec::default()
    }
}

pub const OVERFIT_STEPS: usize = 200;
pub const OVERFIT_LR: f64 = 3e-3;

/// Cosine decay from [`OVERFIT_LR`] to zero over the run.
pub fn overfit_lr(step: usize) -> f64 {
    0.5 * OVERFIT_LR * (1.0 + (std::f64::consts::PI * step as f64 / OVERFIT_STEPS as f64).cos())
}

/// Full-batch AdamW on every window of the scene (one anchor per vehicle).
/// Returns the training ADE(1s) after each step.
pub fn overfit_trace(spec: &ScenarioSpec, lr: &dyn Fn(usize) -> f64, steps: usize) -> Vec<f64> {
    use lagat::nn::ParamStore;
    use lagat::train::run::batch_gradient;
    use lagat::train::AdamW;
    let ds = generate(spec).unwrap();
    let graph = GraphParams::new(30.0, ds.merge_lane_ids.clone());
    let ids: BTreeSet<VehicleId> = ds.vehicle_ids().collect();
    let set = SampleSet::collect(&ds, &graph, &ids, 1);
    assert_eq!(set.len(), spec.vehicles);
    let stats = fit_standardizer(&set);
    let mut store = ParamStore::init(ModelConfig::default(), spec.seed);
    let mut opt = AdamW::new(&store.params, lr(0), 1e-4, 5.0);
    let batch = set.samples.clone();
    (0..steps)
        .map(|k| {
            opt.lr = lr(k);
            batch_gradient(&mut store, &stats, &set, &batch, 0.0).unwrap();
            opt.step(&mut store);
            train_ade_1s(&store.params, &stats, &set)
        })
        .collect()
}

/// A reduced quickstart configuration for end-to-end CLI runs.
pub const SMALL_CONFIG: &str = "\
seed = 42
out_dir = out
rmax = estimate
pretrain.path = synth
pretrain.synth_vehicles = 30
finetune.path = synth
finetune.synth_vehicles = 20
test.path = synth
test.synth_vehicles = 20
synth.duration = 12
synth.merge_window = 2.0, 6.0
model.lstm_hidden = 16
model.heads = 2
model.head_dim = 8
model.decoder_hidden = 32
pretrain.epochs = 2
pretrain.step_sample = 20
finetune.epochs = 2
finetune.step_sample = 20
finetune.lr = 0.0003
eval.stride = 10
";

pub fn write_config(dir: &std::path::Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.conf");
    std::fs::write(&path, text).unwrap();
    path
}

/// Runs the built binary.
pub fn lagat_cmd(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_lagat"))
        .args(args)
        .env_remove("LAGAT_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub const QUICKSTART: [&[&str]; 9] = [
    &["synth"],
    &["ingest"],
    &["estimate-rmax"],
    &["pretrain"],
    &["finetune"],
    &["evaluate", "--setting", "pretrain-test"],
    &["evaluate", "--setting", "zero-shot"],
    &["evaluate", "--setting", "fine-tuned"],
    &["report"],
];

/// Runs the whole pipeline against `config` and returns every file written
/// under `out`, keyed by relative path.
pub fn run_quickstart(config: &std::path::Path, out: &std::path::Path, threads: usize) -> BTreeMap<String, Vec<u8>> {
    let threads = threads.to_string();
    for step in QUICKSTART {
        let mut args: Vec<&str> = step.to_vec();
        args.extend(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", &threads]);
        let o = lagat_cmd(&args);
        assert!(o.status.success(), "{step:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    }
    let mut files = BTreeMap::new();
    collect_files(out, out, &mut files);
    files
}

fn collect_files(root: &std::path::Path, dir: &std::path::Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}
