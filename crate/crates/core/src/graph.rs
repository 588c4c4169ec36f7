//! Per-frame interaction graphs.
//!
//! A directed edge `j -> i` carries the influence of vehicle `j` on vehicle
//! `i`. Edges come from proximity (Euclidean distance within `rmax`) and from
//! structure: recorded leader/follower links and adjacent-lane neighbours
//! within ±10 m longitudinally. Structural edges are flagged mandatory. Every
//! criterion is symmetric, so both directions are always present.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::trajectory::{
    index_by_frame, window_at, Dataset, VehicleId, VehicleState, Window, NODE_FEATURES, T_OBS,
};

/// TTC assigned when the pair is not closing.
pub const TTC_SENTINEL: f64 = 999.0;
/// Longitudinal reach of the adjacent-lane structural rule (m).
pub const ADJACENT_LANE_WINDOW: f64 = 10.0;
/// Edge feature width `[dx, dy, dv, ttc, r]`.
pub const EDGE_FEATURES: usize = 5;

/// Time to collision for a longitudinal `gap` (m) closing at `closing` m/s.
///
/// Only a positive gap that is shrinking yields a finite value; everything
/// else, including non-finite input, maps to the sentinel. The result lies in
/// `[0, 999]`.
pub fn compute_ttc(gap: f64, closing: f64) -> f64 {
    if gap > 0.0 && closing > 0.0 {
        (gap / closing).min(TTC_SENTINEL)
    } else {
        TTC_SENTINEL
    }
}

/// Categorical lane relation of `j` as seen from `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LaneRelation {
    Same = 0,
    Left = 1,
    Right = 2,
    Merging = 3,
}

impl LaneRelation {
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        match code {
            0 => Some(LaneRelation::Same),
            1 => Some(LaneRelation::Left),
            2 => Some(LaneRelation::Right),
            3 => Some(LaneRelation::Merging),
            _ => None,
        }
    }
}

/// Which side a lower lane index lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LaneConvention {
    pub lower_index_is_left: bool,
}

impl Default for LaneConvention {
    fn default() -> Self {
        Self {
            lower_index_is_left: true,
        }
    }
}

/// Lane relation code of `j` relative to `i`.
///
/// Merging wins when exactly one of the two is on a merge lane and their
/// lanes are at most one apart. Otherwise same lane, or the side of `j`;
/// pairs several lanes apart still get a side code.
pub fn lane_relation(
    state_i: &VehicleState,
    state_j: &VehicleState,
    merge_lanes: &BTreeSet<u32>,
    convention: LaneConvention,
) -> LaneRelation {
    let (li, lj) = (state_i.lane_id, state_j.lane_id);
    let merging = merge_lanes.contains(&li) != merge_lanes.contains(&lj);
    if merging && li.abs_diff(lj) <= 1 {
        return LaneRelation::Merging;
    }
    if li == lj {
        return LaneRelation::Same;
    }
    if (lj < li) == convention.lower_index_is_left {
        LaneRelation::Left
    } else {
        LaneRelation::Right
    }
}

/// Pairwise feature of edge `j -> i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeFeature {
    /// `x_j - x_i`
    pub dx: f64,
    /// `y_j - y_i`
    pub dy: f64,
    /// `v_j - v_i`
    pub dv: f64,
    /// Time for `i` to reach `j` ahead of it, or the sentinel.
    pub ttc: f64,
    pub relation: LaneRelation,
}

impl EdgeFeature {
    pub fn between(
        state_i: &VehicleState,
        state_j: &VehicleState,
        merge_lanes: &BTreeSet<u32>,
        convention: LaneConvention,
    ) -> Self {
        let dx = state_j.x - state_i.x;
        let dv = state_j.v - state_i.v;
        Self {
            dx,
            dy: state_j.y - state_i.y,
            dv,
            // i closes on j when it is the faster of the two.
            ttc: compute_ttc(dx, -dv),
            relation: lane_relation(state_i, state_j, merge_lanes, convention),
        }
    }

    pub fn to_array(&self) -> [f64; EDGE_FEATURES] {
        [
            self.dx,
            self.dy,
            self.dv,
            self.ttc,
            self.relation.code() as f64,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    /// Index of the influencing node `j`.
    pub src: usize,
    /// Index of the influenced node `i`.
    pub dst: usize,
    pub feature: EdgeFeature,
    pub mandatory: bool,
}

/// Interaction graph at one frame. Nodes are sorted by vehicle id; edges by
/// `(dst, src)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    pub frame: i64,
    pub nodes: Vec<VehicleId>,
    pub node_features: Vec<[f64; NODE_FEATURES]>,
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn node_index(&self, id: VehicleId) -> Option<usize> {
        self.nodes.binary_search(&id).ok()
    }

    pub fn position(&self, node: usize) -> [f64; 2] {
        let f = &self.node_features[node];
        [f[0], f[1]]
    }

    /// Writes `EDGE src dst dx dy dv ttc r mandatory`, one line per edge,
    /// with vehicle ids as endpoints.
    pub fn write_dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.edges {
            let f = &e.feature;
            writeln!(
                out,
                "EDGE {} {} {} {} {} {} {} {}",
                self.nodes[e.src],
                self.nodes[e.dst],
                f.dx,
                f.dy,
                f.dv,
                f.ttc,
                f.relation.code(),
                u8::from(e.mandatory)
            )?;
        }
        Ok(())
    }
}

/// Construction parameters shared by every frame of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphParams {
    pub rmax: f64,
    pub merge_lane_ids: BTreeSet<u32>,
    pub convention: LaneConvention,
}

impl GraphParams {
    pub fn new(rmax: f64, merge_lane_ids: BTreeSet<u32>) -> Self {
        Self {
            rmax,
            merge_lane_ids,
            convention: LaneConvention::default(),
        }
    }
}

fn within_radius(a: &VehicleState, b: &VehicleState, rmax: f64) -> bool {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    (dx * dx + dy * dy).sqrt() <= rmax
}

fn adjacent_lane_pair(a: &VehicleState, b: &VehicleState) -> bool {
    a.lane_id.abs_diff(b.lane_id) == 1 && (a.x - b.x).abs() <= ADJACENT_LANE_WINDOW
}

/// Builds the interaction graph for states sharing one frame.
///
/// Candidate pairs come from a longitudinal sweep (nothing farther apart than
/// `max(rmax, 10 m)` in `x` can qualify geometrically) plus the recorded
/// leader/follower links.
pub fn build_graph(states: &[&VehicleState], params: &GraphParams) -> SceneGraph {
    let mut sorted: Vec<&VehicleState> = states.to_vec();
    sorted.sort_by_key(|s| s.vehicle_id);
    let frame = sorted.first().map_or(0, |s| s.frame);
    debug_assert!(sorted.iter().all(|s| s.frame == frame));
    let nodes: Vec<VehicleId> = sorted.iter().map(|s| s.vehicle_id).collect();
    let index: HashMap<VehicleId, usize> = nodes.iter().enumerate().map(|(i, id)| (*id, i)).collect();

    // Unordered pair (lo, hi) -> mandatory.
    let mut pairs: BTreeMap<(usize, usize), bool> = BTreeMap::new();
    let mut add = |a: usize, b: usize, mandatory: bool| {
        let key = (a.min(b), a.max(b));
        let slot = pairs.entry(key).or_insert(false);
        *slot |= mandatory;
    };

    for (i, s) in sorted.iter().enumerate() {
        for linked in [s.leader_id, s.follower_id].into_iter().flatten() {
            if let Some(&j) = index.get(&linked) {
                if j != i {
                    add(i, j, true);
                }
            }
        }
    }

    let reach = params.rmax.max(ADJACENT_LANE_WINDOW) * (1.0 + 1e-12) + 1e-12;
    let mut by_x: Vec<usize> = (0..sorted.len()).collect();
    by_x.sort_by(|&a, &b| sorted[a].x.total_cmp(&sorted[b].x).then(a.cmp(&b)));
    for (pos, &a) in by_x.iter().enumerate() {
        for &b in &by_x[pos + 1..] {
            if sorted[b].x - sorted[a].x > reach {
                break;
            }
            let (sa, sb) = (sorted[a], sorted[b]);
            if adjacent_lane_pair(sa, sb) {
                add(a, b, true);
            } else if within_radius(sa, sb, params.rmax) {
                add(a, b, false);
            }
        }
    }

    let mut edges = Vec::with_capacity(pairs.len() * 2);
    for (&(a, b), &mandatory) in &pairs {
        for (dst, src) in [(a, b), (b, a)] {
            edges.push(Edge {
                src,
                dst,
                feature: EdgeFeature::between(
                    sorted[dst],
                    sorted[src],
                    &params.merge_lane_ids,
                    params.convention,
                ),
                mandatory,
            });
        }
    }
    edges.sort_by_key(|e| (e.dst, e.src));

    SceneGraph {
        frame,
        nodes,
        node_features: sorted.iter().map(|s| s.features()).collect(),
        edges,
    }
}

/// `T_OBS` consecutive graphs ending at an anchor frame.
#[derive(Clone, Debug)]
pub struct GraphSequence {
    pub frames: Vec<Arc<SceneGraph>>,
    /// Vehicles present in all frames and with a complete future.
    pub target_vehicles: Vec<VehicleId>,
}

impl GraphSequence {
    pub fn anchor(&self) -> &SceneGraph {
        self.frames.last().expect("sequence is never empty")
    }

    pub fn anchor_frame(&self) -> i64 {
        self.anchor().frame
    }

    /// The 30-frame feature history of every node of the anchor graph.
    ///
    /// Vehicles missing from some frames of the window have those frames
    /// filled with the nearest earlier observation, or with the first later
    /// one when nothing earlier exists.
    pub fn node_histories(&self) -> Vec<Vec<[f64; NODE_FEATURES]>> {
        let anchor = self.anchor();
        anchor
            .nodes
            .iter()
            .map(|&id| {
                let observed: Vec<Option<[f64; NODE_FEATURES]>> = self
                    .frames
                    .iter()
                    .map(|g| g.node_index(id).map(|n| g.node_features[n]))
                    .collect();
                let first = observed.iter().flatten().next().copied().expect("present at anchor");
                let mut last = first;
                observed
                    .into_iter()
                    .map(|o| {
                        if let Some(f) = o {
                            last = f;
                        }
                        last
                    })
                    .collect()
            })
            .collect()
    }
}

/// A graph sequence together with the windows of its target vehicles.
#[derive(Clone, Debug)]
pub struct SceneSequence {
    pub sequence: GraphSequence,
    /// One window per target vehicle, in `target_vehicles` order.
    pub windows: Vec<Window>,
}

/// Every anchor frame at which at least one vehicle has a full window.
pub fn eligible_anchors(dataset: &Dataset) -> BTreeSet<i64> {
    let mut anchors = BTreeSet::new();
    for traj in dataset.trajectories() {
        for s in traj.states() {
            if window_at(traj, s.frame).is_some() {
                anchors.insert(s.frame);
            }
        }
    }
    anchors
}

/// Graphs for the requested frames, built in parallel.
pub fn build_frame_graphs(
    dataset: &Dataset,
    params: &GraphParams,
    frames: &BTreeSet<i64>,
) -> BTreeMap<i64, Arc<SceneGraph>> {
    let index = index_by_frame(dataset);
    let work: Vec<(i64, &Vec<&VehicleState>)> = frames
        .iter()
        .filter_map(|f| index.get(f).map(|s| (*f, s)))
        .collect();
    work.into_par_iter()
        .map(|(f, states)| (f, Arc::new(build_graph(states, params))))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Assembles a graph sequence for each eligible anchor frame.
///
/// With `anchor_stride > 1` only anchors whose offset from the first eligible
/// anchor is a multiple of the stride are kept. Graphs are recomputed per
/// frame and shared between overlapping sequences.
pub fn build_sequences(
    dataset: &Dataset,
    params: &GraphParams,
    anchor_stride: usize,
) -> Vec<SceneSequence> {
    let eligible = eligible_anchors(dataset);
    let Some(&first) = eligible.iter().next() else {
        return Vec::new();
    };
    let stride = anchor_stride.max(1) as i64;
    let anchors: Vec<i64> = eligible
        .into_iter()
        .filter(|a| (a - first) % stride == 0)
        .collect();
    sequences_at(dataset, params, &anchors)
}

/// Graph sequences at the given anchor frames; anchors without any target
/// are skipped.
pub fn sequences_at(dataset: &Dataset, params: &GraphParams, anchors: &[i64]) -> Vec<SceneSequence> {
    let frames: BTreeSet<i64> = anchors
        .iter()
        .flat_map(|&a| (a - T_OBS as i64 + 1)..=a)
        .collect();
    let graphs = build_frame_graphs(dataset, params, &frames);

    let mut out = Vec::with_capacity(anchors.len());
    for &anchor in anchors {
        let Some(seq_frames) = ((anchor - T_OBS as i64 + 1)..=anchor)
            .map(|f| graphs.get(&f).cloned())
            .collect::<Option<Vec<_>>>()
        else {
            continue;
        };
        let mut windows = Vec::new();
        for &id in &seq_frames[T_OBS - 1].nodes {
            let traj = dataset.trajectory(id).expect("graph nodes come from the dataset");
            if let Some(w) = window_at(traj, anchor) {
                windows.push(w);
            }
        }
        if windows.is_empty() {
            continue;
        }
        out.push(SceneSequence {
            sequence: GraphSequence {
                frames: seq_frames,
                target_vehicles: windows.iter().map(|w| w.vehicle_id).collect(),
            },
            windows,
        });
    }
    out
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of finite values.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(values[lo] + frac * (values[hi] - values[lo]))
}

/// Proximity radius: 95th percentile of every recorded leader gap pooled
/// over the given datasets.
pub fn estimate_rmax(datasets: &[&Dataset]) -> Result<f64> {
    let mut values: Vec<f64> = datasets
        .iter()
        .flat_map(|d| d.states())
        .filter_map(|s| s.space_headway)
        .filter(|h| h.is_finite())
        .collect();
    percentile(&mut values, 0.95)
        .ok_or_else(|| Error::invalid("no finite headway values to estimate rmax from"))
}

/// Writes one dump file per anchor graph into `dir`.
pub fn dump_graphs(sequences: &[SceneSequence], dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for seq in sequences {
        let g = seq.sequence.anchor();
        let path = dir.join(format!("frame_{:06}.txt", g.frame));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        g.write_dump(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(sequences.len())
}
