//! Pre-training and fine-tuning loops.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::{ttc_penalty, window_loss, LossBreakdown};
use super::optim::{AdamW, Plateau};
use crate::error::{Error, Result};
use crate::graph::{sequences_at, GraphParams, SceneSequence};
use crate::nn::checkpoint::{Checkpoint, CheckpointMeta};
use crate::nn::model::{backward, forward, k_hop_nodes, scene_view, Mode};
use crate::nn::{ModelConfig, ParamStore, Params, Prediction, RowGrad, Standardizer};
use crate::trajectory::{extract_windows, split_vehicles, Dataset, VehicleId, VehicleSplit};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Frame stride between consecutive windows of one vehicle.
    pub step_sample: usize,
    pub patience: usize,
    pub factor: f64,
    /// Weight of the predicted-TTC penalty; 0 disables it.
    pub lambda2: f64,
    pub seed: u64,
    /// Train/validation/test vehicle fractions.
    pub split: [f64; 3],
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            clip_norm: 5.0,
            step_sample: 300,
            patience: 3,
            factor: 0.5,
            lambda2: 0.0,
            seed: 42,
            split: [0.70, 0.15, 0.15],
        }
    }

    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            epochs: 8,
            lr: 3e-4,
            split: [0.70, 0.30, 0.0],
            ..Self::pretrain()
        }
    }
}

/// Target windows and the graph sequences they live in.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    pub sequences: Vec<SceneSequence>,
    /// `(sequence index, window index within the sequence)`.
    pub samples: Vec<(usize, usize)>,
}

impl SampleSet {
    /// Windows of `vehicles` with the given per-vehicle stride.
    pub fn collect(dataset: &Dataset, graph: &GraphParams, vehicles: &BTreeSet<VehicleId>, stride: usize) -> Self {
        let mut wanted: BTreeMap<i64, BTreeSet<VehicleId>> = BTreeMap::new();
        for &id in vehicles {
            if let Some(traj) = dataset.trajectory(id) {
                for w in extract_windows(traj, stride) {
                    wanted.entry(w.anchor_frame).or_default().insert(id);
                }
            }
        }
        let anchors: Vec<i64> = wanted.keys().copied().collect();
        let sequences = sequences_at(dataset, graph, &anchors);
        let mut set = SampleSet::default();
        for seq in sequences {
            let ids = &wanted[&seq.sequence.anchor_frame()];
            let picks: Vec<usize> = seq
                .windows
                .iter()
                .enumerate()
                .filter(|(_, w)| ids.contains(&w.vehicle_id))
                .map(|(i, _)| i)
                .collect();
            if picks.is_empty() {
                continue;
            }
            let s = set.sequences.len();
            set.samples.extend(picks.into_iter().map(|w| (s, w)));
            set.sequences.push(seq);
        }
        set
    }

    pub fn extend(&mut self, other: SampleSet) {
        let offset = self.sequences.len();
        self.samples.extend(other.samples.into_iter().map(|(s, w)| (s + offset, w)));
        self.sequences.extend(other.sequences);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Statistics over the history frames and anchor edges of a sample set.
pub fn fit_standardizer(set: &SampleSet) -> Standardizer {
    let edges: Vec<_> = set
        .sequences
        .iter()
        .flat_map(|seq| seq.sequence.anchor().edges.iter().map(|e| e.feature.to_array()))
        .collect();
    let nodes: Vec<_> = set
        .samples
        .iter()
        .flat_map(|&(s, w)| set.sequences[s].windows[w].history.iter().map(|st| st.features()))
        .collect();
    Standardizer::fit(&nodes, &edges)
}

/// Summed loss over a group of samples sharing one sequence, and the
/// gradient of that sum when requested.
pub fn group_pass(
    params: &Params,
    stats: &Standardizer,
    seq: &SceneSequence,
    windows: &[usize],
    lambda2: f64,
    grad: Option<bool>,
) -> Result<(LossBreakdown, Option<Params>)> {
    let anchor = seq.sequence.anchor();
    let globals: Vec<usize> = windows
        .iter()
        .map(|&w| {
            let id = seq.windows[w].vehicle_id;
            anchor
                .node_index(id)
                .ok_or_else(|| Error::invalid(format!("vehicle {id} absent from anchor graph")))
        })
        .collect::<Result<_>>()?;
    let with_ttc = lambda2 > 0.0;
    let hops = if with_ttc { 3 } else { 2 };
    let nodes = k_hop_nodes(anchor, &globals, hops);
    let view = scene_view(&seq.sequence, stats, Some(&nodes));
    let local = |g: usize| nodes.binary_search(&g).expect("target inside its own neighbourhood");

    // Decode targets, plus their neighbours when the TTC term needs them.
    let mut decode: BTreeSet<usize> = globals.iter().map(|&g| local(g)).collect();
    if with_ttc {
        for e in anchor.edges.iter().filter(|e| globals.contains(&e.dst)) {
            decode.insert(local(e.src));
        }
    }
    let decode: Vec<usize> = decode.into_iter().collect();
    let slot = |l: usize| decode.binary_search(&l).expect("decoded node");

    let mode = match grad {
        Some(encoder_grad) => Mode::Train { encoder_grad },
        None => Mode::Inference,
    };
    let pass = forward(params, &view.input, &decode, mode)?;
    let mut d_rows: Vec<Vec<Vec<RowGrad>>> = pass
        .predictions
        .iter()
        .map(|p| p.horizons.iter().map(|r| vec![[0.0; 5]; r.len()]).collect())
        .collect();

    let tracks: Vec<([f64; 2], &Prediction)> = decode
        .iter()
        .zip(&pass.predictions)
        .map(|(&l, p)| (anchor.position(nodes[l]), p))
        .collect();

    let mut total = LossBreakdown::default();
    for (&w, &g) in windows.iter().zip(&globals) {
        let k = slot(local(g));
        let (mut loss, grads) = window_loss(&pass.predictions[k], &seq.windows[w])?;
        for (acc, g) in d_rows[k].iter_mut().flatten().zip(grads.iter().flatten()) {
            for c in 0..5 {
                acc[c] += g[c];
            }
        }
        if with_ttc {
            let pairs: Vec<(usize, usize)> = anchor
                .edges
                .iter()
                .filter(|e| e.dst == g)
                .flat_map(|e| {
                    let j = slot(local(e.src));
                    [(k, j), (j, k)]
                })
                .collect();
            let (pen, pg) = ttc_penalty(&tracks, &pairs);
            loss.ttc_penalty = pen;
            for (acc, g) in d_rows.iter_mut().flatten().flatten().zip(pg.iter().flatten().flatten()) {
                for c in 0..5 {
                    acc[c] += lambda2 * g[c];
                }
            }
        }
        loss.combined = LossBreakdown::combine(loss.nll, loss.ade, loss.ttc_penalty, lambda2);
        total.accumulate(&loss);
    }

    let grads = grad.map(|_| {
        let mut g = params.zeros_like();
        backward(params, &pass, &d_rows, &mut g);
        g
    });
    Ok((total, grads))
}

fn group_by_sequence(batch: &[(usize, usize)]) -> Vec<(usize, Vec<usize>)> {
    let mut order: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut index: HashMap<usize, usize> = HashMap::new();
    for &(s, w) in batch {
        let i = *index.entry(s).or_insert_with(|| {
            order.push((s, Vec::new()));
            order.len() - 1
        });
        order[i].1.push(w);
    }
    order
}

/// Mean loss over a sample set.
pub fn evaluate_loss(params: &Params, stats: &Standardizer, set: &SampleSet, lambda2: f64) -> Result<LossBreakdown> {
    if set.is_empty() {
        return Err(Error::InsufficientPopulation("no samples to evaluate".into()));
    }
    let groups = group_by_sequence(&set.samples);
    let results: Vec<Result<(LossBreakdown, Option<Params>)>> = groups
        .par_iter()
        .map(|(s, ws)| group_pass(params, stats, &set.sequences[*s], ws, lambda2, None))
        .collect();
    let mut total = LossBreakdown::default();
    for r in results {
        total.accumulate(&r?.0);
    }
    Ok(total.scaled(1.0 / set.len() as f64))
}

/// Averages the batch gradient into `store.grads` and returns the summed
/// batch loss.
pub fn batch_gradient(
    store: &mut ParamStore,
    stats: &Standardizer,
    set: &SampleSet,
    batch: &[(usize, usize)],
    lambda2: f64,
) -> Result<LossBreakdown> {
    let encoder_grad = !store.encoder_frozen();
    let groups = group_by_sequence(batch);
    let params = &store.params;
    let results: Vec<Result<(LossBreakdown, Option<Params>)>> = groups
        .par_iter()
        .map(|(s, ws)| group_pass(params, stats, &set.sequences[*s], ws, lambda2, Some(encoder_grad)))
        .collect();
    store.zero_grads();
    let mut total = LossBreakdown::default();
    for r in results {
        let (loss, g) = r?;
        total.accumulate(&loss);
        store.grads.add_assign(&g.expect("gradient requested"));
    }
    store.grads.scale(1.0 / batch.len() as f64);
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Validation components.
    pub val: LossBreakdown,
    pub lambda: [f64; 4],
}

pub const LOG_HEADER: &str =
    "epoch,train_loss,val_loss,lr,nll_1s,nll_3s,nll_5s,ade_1s,ade_3s,ade_5s,lambda0,lambda1,lambda2,lambda3,ttc_penalty";

pub fn write_log<W: Write>(logs: &[EpochLog], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for l in logs {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            l.epoch,
            l.train_loss,
            l.val_loss,
            l.lr,
            l.val.nll[0],
            l.val.nll[1],
            l.val.nll[2],
            l.val.ade[0],
            l.val.ade[1],
            l.val.ade[2],
            l.lambda[0],
            l.lambda[1],
            l.lambda[2],
            l.lambda[3],
            l.val.ttc_penalty
        )?;
    }
    Ok(())
}

pub fn save_log(logs: &[EpochLog], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_log(logs, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub splits: Vec<VehicleSplit>,
}

/// Index of the first minimum.
pub fn best_epoch_index(losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in losses.iter().enumerate() {
        if best.map_or(true, |(_, b)| l < b) {
            best = Some((i, l));
        }
    }
    best.map(|(i, _)| i)
}

fn train_loop(
    mut store: ParamStore,
    stats: Standardizer,
    train: &SampleSet,
    val: &SampleSet,
    cfg: &TrainConfig,
    rmax: f64,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(Error::InsufficientPopulation("training split has no windows".into()));
    }
    if val.is_empty() {
        return Err(Error::InsufficientPopulation("validation split has no windows".into()));
    }
    let mut opt = AdamW::new(&store.params, cfg.lr, cfg.weight_decay, cfg.clip_norm);
    let mut sched = Plateau::new(cfg.lr, cfg.factor, cfg.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut order = train.samples.clone();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Params)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = sched.lr;
        opt.lr = lr;
        let mut train_total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let loss = batch_gradient(&mut store, &stats, train, batch, cfg.lambda2)?;
            train_total += loss.combined;
            opt.step(&mut store);
        }
        let val_loss = evaluate_loss(&store.params, &stats, val, cfg.lambda2)?;
        let log = EpochLog {
            epoch,
            train_loss: train_total / order.len() as f64,
            val_loss: val_loss.combined,
            lr,
            val: val_loss.clone(),
            lambda: store.params.lambda(),
        };
        log::info!(
            "{} epoch {epoch}: train {:.4} val {:.4} lr {lr}",
            cfg.phase.as_str(),
            log.train_loss,
            log.val_loss
        );
        if best.as_ref().map_or(true, |(b, _, _)| val_loss.combined < *b) {
            best = Some((val_loss.combined, epoch, store.params.clone()));
        }
        sched.observe(val_loss.combined);
        logs.push(log);
    }

    let (best_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, store.params.clone()),
    };
    store.params = params;
    store.zero_grads();
    Ok((
        Checkpoint {
            store,
            stats,
            meta: CheckpointMeta {
                phase: cfg.phase.as_str().to_string(),
                best_epoch,
                rmax,
            },
        },
        logs,
    ))
}

/// Sample sets per role after splitting every dataset by vehicle.
pub fn split_samples(
    datasets: &[&Dataset],
    rmax: f64,
    cfg: &TrainConfig,
) -> Result<([SampleSet; 3], Vec<VehicleSplit>)> {
    let mut sets: [SampleSet; 3] = Default::default();
    let mut splits = Vec::new();
    for (d, ds) in datasets.iter().enumerate() {
        let split = split_vehicles(ds, cfg.split, cfg.seed.wrapping_add(d as u64))?;
        let graph = GraphParams::new(rmax, ds.merge_lane_ids.clone());
        for (set, ids) in sets.iter_mut().zip([&split.train, &split.val, &split.test]) {
            if !ids.is_empty() {
                set.extend(SampleSet::collect(ds, &graph, ids, cfg.step_sample));
            }
        }
        splits.push(split);
    }
    Ok((sets, splits))
}

/// Trains from scratch on the pooled datasets and keeps the epoch with the
/// lowest validation loss.
pub fn run_pretrain(datasets: &[&Dataset], rmax: f64, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    model.validate()?;
    let ([train, val, _], splits) = split_samples(datasets, rmax, cfg)?;
    let stats = fit_standardizer(&train);
    let store = ParamStore::init(model.clone(), cfg.seed);
    log::info!(
        "pretrain: {} train / {} val windows, {} parameters",
        train.len(),
        val.len(),
        store.count_parameters()
    );
    let (checkpoint, log) = train_loop(store, stats, &train, &val, cfg, rmax)?;
    Ok(TrainOutcome { checkpoint, log, splits })
}

/// Continues training from a checkpoint with the encoder frozen and the
/// checkpoint's standardisation statistics.
pub fn run_finetune(checkpoint: Checkpoint, dataset: &Dataset, rmax: f64, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let ([train, val, _], splits) = split_samples(&[dataset], rmax, cfg)?;
    let mut store = checkpoint.store;
    store.freeze_encoder();
    store.zero_grads();
    log::info!(
        "finetune: {} train / {} val windows, {} trainable parameters",
        train.len(),
        val.len(),
        store.count_parameters()
    );
    let (checkpoint, log) = train_loop(store, checkpoint.stats, &train, &val, cfg, rmax)?;
    Ok(TrainOutcome { checkpoint, log, splits })
}
