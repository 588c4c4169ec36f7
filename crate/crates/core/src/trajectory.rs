//! Canonical trajectory data model.
//!
//! Everything downstream of ingestion works on [`Dataset`]s sampled on a
//! 10 Hz frame grid in SI units with Frenet coordinates (`x` along the
//! carriageway, `y` across lanes). The frame index is the temporal key; `t`
//! is kept for auditing only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type VehicleId = i64;

/// Sampling rate of the harmonized frame grid.
pub const FRAME_HZ: f64 = 10.0;
/// Seconds between consecutive frames.
pub const FRAME_DT: f64 = 1.0 / FRAME_HZ;
/// Number of observed frames fed to the encoder.
pub const T_OBS: usize = 30;
/// Longest prediction horizon in frames.
pub const MAX_FUTURE: usize = 50;
/// Number of node features per frame.
pub const NODE_FEATURES: usize = 6;

/// Prediction horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Horizon {
    S1,
    S3,
    S5,
}

impl Horizon {
    pub const ALL: [Horizon; 3] = [Horizon::S1, Horizon::S3, Horizon::S5];

    /// Number of 10 Hz steps covered by the horizon.
    pub fn steps(self) -> usize {
        match self {
            Horizon::S1 => 10,
            Horizon::S3 => 30,
            Horizon::S5 => 50,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Horizon::S1 => "1s",
            Horizon::S3 => "3s",
            Horizon::S5 => "5s",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Where a dataset came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceTag {
    NgsimUs101,
    NgsimI80,
    UteW1,
    UteW2,
    Synthetic,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::NgsimUs101 => "ngsim_us101",
            SourceTag::NgsimI80 => "ngsim_i80",
            SourceTag::UteW1 => "ute_w1",
            SourceTag::UteW2 => "ute_w2",
            SourceTag::Synthetic => "synthetic",
        }
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ngsim_us101" => SourceTag::NgsimUs101,
            "ngsim_i80" => SourceTag::NgsimI80,
            "ute_w1" => SourceTag::UteW1,
            "ute_w2" => SourceTag::UteW2,
            "synthetic" => SourceTag::Synthetic,
            other => return Err(Error::invalid(format!("unknown source tag `{other}`"))),
        })
    }
}

/// One vehicle's kinematic record at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VehicleState {
    pub vehicle_id: VehicleId,
    /// Index on the 10 Hz grid, `round(t * 10)`.
    pub frame: i64,
    /// Seconds.
    pub t: f64,
    /// Longitudinal position (m).
    pub x: f64,
    /// Lateral position (m).
    pub y: f64,
    /// Speed (m/s).
    pub v: f64,
    /// Acceleration (m/s²).
    pub a: f64,
    pub lane_id: u32,
    /// `lane_id / lane_max`.
    pub lane_norm: f64,
    pub lane_change: bool,
    pub leader_id: Option<VehicleId>,
    pub follower_id: Option<VehicleId>,
    /// Gap to the leader (m), when recorded.
    pub space_headway: Option<f64>,
}

impl VehicleState {
    /// Node feature vector `[x, y, v, a, lane_norm, lane_change]`.
    pub fn features(&self) -> [f64; NODE_FEATURES] {
        [
            self.x,
            self.y,
            self.v,
            self.a,
            self.lane_norm,
            if self.lane_change { 1.0 } else { 0.0 },
        ]
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Time-ordered states of a single vehicle.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    vehicle_id: VehicleId,
    states: Vec<VehicleState>,
}

impl Trajectory {
    /// Builds a trajectory, checking that every state belongs to `vehicle_id`
    /// and that frames are strictly increasing.
    pub fn new(vehicle_id: VehicleId, states: Vec<VehicleState>) -> Result<Self> {
        for s in &states {
            if s.vehicle_id != vehicle_id {
                return Err(Error::invalid(format!(
                    "state of vehicle {} in trajectory of vehicle {vehicle_id}",
                    s.vehicle_id
                )));
            }
        }
        for w in states.windows(2) {
            if w[1].frame <= w[0].frame {
                return Err(Error::invalid(format!(
                    "vehicle {vehicle_id}: frames not strictly increasing ({} then {})",
                    w[0].frame, w[1].frame
                )));
            }
        }
        Ok(Self { vehicle_id, states })
    }

    pub fn vehicle_id(&self) -> VehicleId {
        self.vehicle_id
    }

    pub fn states(&self) -> &[VehicleState] {
        &self.states
    }

    pub fn into_states(self) -> Vec<VehicleState> {
        self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State at `frame`, if observed.
    pub fn at_frame(&self, frame: i64) -> Option<&VehicleState> {
        self.states
            .binary_search_by_key(&frame, |s| s.frame)
            .ok()
            .map(|i| &self.states[i])
    }
}

/// A harmonized collection of trajectories from one source.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub source_tag: SourceTag,
    pub frequency_hz: f64,
    pub lane_max: u32,
    pub merge_lane_ids: BTreeSet<u32>,
    trajectories: BTreeMap<VehicleId, Trajectory>,
}

impl Dataset {
    pub fn new(
        source_tag: SourceTag,
        lane_max: u32,
        merge_lane_ids: BTreeSet<u32>,
        trajectories: impl IntoIterator<Item = Trajectory>,
    ) -> Result<Self> {
        if lane_max == 0 {
            return Err(Error::invalid("lane_max must be at least 1"));
        }
        let mut map = BTreeMap::new();
        for traj in trajectories {
            if let Some(s) = traj.states.iter().find(|s| s.lane_id > lane_max) {
                return Err(Error::invalid(format!(
                    "vehicle {} frame {}: lane {} exceeds lane_max {lane_max}",
                    s.vehicle_id, s.frame, s.lane_id
                )));
            }
            if map.insert(traj.vehicle_id, traj).is_some() {
                return Err(Error::invalid("duplicate vehicle id in dataset"));
            }
        }
        Ok(Self {
            source_tag,
            frequency_hz: FRAME_HZ,
            lane_max,
            merge_lane_ids,
            trajectories: map,
        })
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.values()
    }

    pub fn trajectory(&self, id: VehicleId) -> Option<&Trajectory> {
        self.trajectories.get(&id)
    }

    pub fn vehicle_ids(&self) -> impl Iterator<Item = VehicleId> + '_ {
        self.trajectories.keys().copied()
    }

    pub fn num_vehicles(&self) -> usize {
        self.trajectories.len()
    }

    pub fn num_states(&self) -> usize {
        self.trajectories.values().map(Trajectory::len).sum()
    }

    pub fn states(&self) -> impl Iterator<Item = &VehicleState> {
        self.trajectories.values().flat_map(|t| t.states.iter())
    }
}

/// Groups every state under its frame. Frames iterate in ascending order and
/// states within a frame are ordered by vehicle id.
pub fn index_by_frame(dataset: &Dataset) -> BTreeMap<i64, Vec<&VehicleState>> {
    let mut index: BTreeMap<i64, Vec<&VehicleState>> = BTreeMap::new();
    for state in dataset.states() {
        index.entry(state.frame).or_default().push(state);
    }
    index
}

/// Future displacements relative to the last observed position.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementTarget {
    pub horizon: Horizon,
    pub steps: Vec<[f64; 2]>,
}

/// A 30-frame history with its three horizon targets.
#[derive(Clone, Debug)]
pub struct Window {
    pub vehicle_id: VehicleId,
    /// Last observed frame.
    pub anchor_frame: i64,
    pub history: Vec<VehicleState>,
    pub targets: [DisplacementTarget; 3],
}

impl Window {
    pub fn anchor_position(&self) -> [f64; 2] {
        self.history[T_OBS - 1].position()
    }

    pub fn target(&self, horizon: Horizon) -> &DisplacementTarget {
        &self.targets[horizon.index()]
    }
}

/// Cuts a trajectory into training windows.
///
/// A window needs 30 gap-free history frames followed by 50 gap-free future
/// frames, so one sample serves all three horizons. After emitting a window
/// starting at state `i` the next candidate is `i + stride`.
pub fn extract_windows(traj: &Trajectory, stride: usize) -> Vec<Window> {
    let stride = stride.max(1);
    let span = T_OBS + MAX_FUTURE;
    let states = traj.states();
    let mut out = Vec::new();
    let mut i = 0;
    while i + span <= states.len() {
        if states[i + span - 1].frame - states[i].frame == (span - 1) as i64 {
            out.push(make_window(traj.vehicle_id, &states[i..i + span]));
            i += stride;
        } else {
            i += 1;
        }
    }
    out
}

/// The window whose anchor is `anchor_frame`, if the trajectory supports one.
pub fn window_at(traj: &Trajectory, anchor_frame: i64) -> Option<Window> {
    let states = traj.states();
    let anchor = states.binary_search_by_key(&anchor_frame, |s| s.frame).ok()?;
    let start = anchor.checked_sub(T_OBS - 1)?;
    let end = anchor + MAX_FUTURE;
    if end >= states.len() {
        return None;
    }
    if states[end].frame - states[start].frame != (T_OBS + MAX_FUTURE - 1) as i64 {
        return None;
    }
    Some(make_window(traj.vehicle_id, &states[start..=end]))
}

fn make_window(vehicle_id: VehicleId, span: &[VehicleState]) -> Window {
    let history = span[..T_OBS].to_vec();
    let last = history[T_OBS - 1].position();
    let future = &span[T_OBS..];
    let targets = Horizon::ALL.map(|h| DisplacementTarget {
        horizon: h,
        steps: future[..h.steps()]
            .iter()
            .map(|s| [s.x - last[0], s.y - last[1]])
            .collect(),
    });
    Window {
        vehicle_id,
        anchor_frame: history[T_OBS - 1].frame,
        history,
        targets,
    }
}

/// Vehicle-level partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VehicleSplit {
    pub train: BTreeSet<VehicleId>,
    pub val: BTreeSet<VehicleId>,
    pub test: BTreeSet<VehicleId>,
}

/// Splits vehicle ids into train/val/test with the given fractions.
///
/// Validation and test sizes are `floor(f * n)`; whatever is left goes to
/// train. Deterministic for a fixed seed.
pub fn split_vehicles(
    dataset: &Dataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<VehicleSplit> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::invalid(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let n = dataset.num_vehicles();
    if n < 3 {
        return Err(Error::InsufficientPopulation(format!(
            "{n} vehicles, need at least 3 to split"
        )));
    }
    // The epsilon absorbs products like 0.7 * 30 = 20.999999999999996.
    let count = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let n_val = count(fractions[1]);
    let n_test = count(fractions[2]);

    let mut ids: Vec<VehicleId> = dataset.vehicle_ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let val = ids[..n_val].iter().copied().collect();
    let test = ids[n_val..n_val + n_test].iter().copied().collect();
    let train = ids[n_val + n_test..].iter().copied().collect();
    Ok(VehicleSplit { train, val, test })
}
