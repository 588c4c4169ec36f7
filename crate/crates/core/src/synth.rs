//! Deterministic merge-zone scenarios for exercising the pipeline without
//! recorded data.
//!
//! Vehicles follow an IDM car-following rule in their lane. Vehicles that
//! start on a merge lane shift one lane toward the mainline at a random
//! moment inside the merge window.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::save_dataset;
use crate::trajectory::{Dataset, SourceTag, Trajectory, VehicleId, VehicleState, FRAME_DT, FRAME_HZ};

/// Lane width (m).
pub const LANE_WIDTH: f64 = 3.5;
/// Bumper-to-bumper length of every vehicle (m).
pub const VEHICLE_LENGTH: f64 = 4.5;
/// Frames taken by a lateral transition (3 s).
pub const MERGE_FRAMES: i64 = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub lanes: u32,
    pub merge_lane_ids: BTreeSet<u32>,
    pub vehicles: usize,
    /// Seconds; `duration * 10` frames are generated.
    pub duration: f64,
    pub seed: u64,
    /// IDM desired speed (m/s).
    pub desired_speed: f64,
    /// Half-width of the uniform per-vehicle desired-speed jitter (m/s).
    pub speed_jitter: f64,
    /// IDM time headway (s).
    pub time_headway: f64,
    /// IDM maximum acceleration (m/s²).
    pub max_accel: f64,
    /// IDM comfortable deceleration (m/s²).
    pub comfort_decel: f64,
    /// Hard braking limit (m/s²).
    pub max_decel: f64,
    /// IDM standstill gap (m).
    pub min_gap: f64,
    /// Merge start times are drawn uniformly from this interval (s).
    pub merge_window: [f64; 2],
    /// Length of road available for initial placement (m).
    pub road_length: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            lanes: 4,
            merge_lane_ids: BTreeSet::from([4]),
            vehicles: 20,
            duration: 10.0,
            seed: 42,
            desired_speed: 25.0,
            speed_jitter: 2.0,
            time_headway: 1.5,
            max_accel: 1.5,
            comfort_decel: 2.0,
            max_decel: 6.0,
            min_gap: 2.0,
            merge_window: [2.0, 6.0],
            road_length: 1000.0,
        }
    }
}

impl ScenarioSpec {
    pub fn frames(&self) -> usize {
        (self.duration * FRAME_HZ).round() as usize
    }

    /// Initial spacing between consecutive vehicles of one lane.
    pub fn spacing(&self) -> f64 {
        self.min_gap + VEHICLE_LENGTH + self.desired_speed * self.time_headway
    }

    /// Vehicles that fit on the road at the initial spacing.
    pub fn capacity(&self) -> usize {
        self.lanes as usize * (self.road_length / self.spacing()).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("duration", self.duration),
            ("desired_speed", self.desired_speed),
            ("time_headway", self.time_headway),
            ("max_accel", self.max_accel),
            ("comfort_decel", self.comfort_decel),
            ("max_decel", self.max_decel),
            ("min_gap", self.min_gap),
            ("road_length", self.road_length),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("scenario {name} must be positive")));
        }
        if self.lanes == 0 {
            return Err(Error::invalid("scenario needs at least one lane"));
        }
        if self.speed_jitter < 0.0 || self.speed_jitter >= self.desired_speed {
            return Err(Error::invalid("speed_jitter must lie in [0, desired_speed)"));
        }
        if let Some(l) = self.merge_lane_ids.iter().find(|&&l| l == 0 || l > self.lanes) {
            return Err(Error::invalid(format!("merge lane {l} outside 1..={}", self.lanes)));
        }
        if !self.merge_lane_ids.is_empty() && self.merge_lane_ids.len() as u32 >= self.lanes {
            return Err(Error::invalid("every lane is a merge lane; nothing to merge into"));
        }
        if !(self.merge_window[0] >= 0.0 && self.merge_window[0] <= self.merge_window[1]) {
            return Err(Error::invalid("merge_window must be an ordered pair of nonnegative times"));
        }
        if self.vehicles == 0 {
            return Err(Error::invalid("scenario needs at least one vehicle"));
        }
        if self.vehicles > self.capacity() {
            return Err(Error::invalid(format!(
                "{} vehicles exceed the road capacity of {} at {:.1} m spacing",
                self.vehicles,
                self.capacity(),
                self.spacing()
            )));
        }
        Ok(())
    }
}

/// Lateral centre of a lane.
pub fn lane_center(lane: u32) -> f64 {
    (lane as f64 - 0.5) * LANE_WIDTH
}

/// Mainline lane a merge-lane vehicle moves into.
fn merge_target(lane: u32, merge: &BTreeSet<u32>, lanes: u32) -> Option<u32> {
    [lane.checked_sub(1), Some(lane + 1)]
        .into_iter()
        .flatten()
        .find(|&l| l >= 1 && l <= lanes && !merge.contains(&l))
}

struct Sim {
    x: f64,
    v: f64,
    v0: f64,
    from_lane: u32,
    to_lane: u32,
    merge_start: Option<i64>,
}

impl Sim {
    fn lane(&self, frame: i64) -> u32 {
        match self.merge_start {
            Some(s) if frame - s >= MERGE_FRAMES / 2 => self.to_lane,
            _ => self.from_lane,
        }
    }

    fn lateral(&self, frame: i64) -> (f64, bool) {
        let (a, b) = (lane_center(self.from_lane), lane_center(self.to_lane));
        match self.merge_start {
            Some(s) if frame >= s && frame < s + MERGE_FRAMES => {
                (a + (b - a) * (frame - s) as f64 / MERGE_FRAMES as f64, true)
            }
            Some(s) if frame >= s + MERGE_FRAMES => (b, false),
            _ => (a, false),
        }
    }
}

/// IDM acceleration, clamped to `[-max_decel, max_accel]`.
pub fn idm_accel(spec: &ScenarioSpec, v: f64, v0: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / v0).powi(4);
    let interaction = match leader {
        Some((gap, v_lead)) => {
            let s_star = spec.min_gap
                + v * spec.time_headway
                + v * (v - v_lead) / (2.0 * (spec.max_accel * spec.comfort_decel).sqrt());
            let s = gap.max(0.1);
            (s_star.max(0.0) / s).powi(2)
        }
        None => 0.0,
    };
    (spec.max_accel * (free - interaction)).clamp(-spec.max_decel, spec.max_accel)
}

/// Nearest vehicle ahead of and behind every vehicle in its lane, by
/// position then id.
fn neighbours(lanes: &[u32], xs: &[f64]) -> Vec<(Option<usize>, Option<usize>)> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| lanes[a].cmp(&lanes[b]).then(xs[a].total_cmp(&xs[b])).then(a.cmp(&b)));
    let mut out = vec![(None, None); xs.len()];
    for w in order.windows(2) {
        let (back, front) = (w[0], w[1]);
        if lanes[back] == lanes[front] {
            out[back].0 = Some(front);
            out[front].1 = Some(back);
        }
    }
    out
}

/// Simulates the scenario. Vehicle ids run from 1 in placement order.
pub fn generate(spec: &ScenarioSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frames = spec.frames() as i64;
    let spacing = spec.spacing();
    let mut sims = Vec::with_capacity(spec.vehicles);
    for i in 0..spec.vehicles {
        let lane = (i as u32 % spec.lanes) + 1;
        let slot = (i as u32 / spec.lanes) as f64;
        let x = slot * spacing + rng.gen_range(0.0..0.2 * spacing);
        let v0 = spec.desired_speed + rng.gen_range(-1.0..=1.0) * spec.speed_jitter;
        let merge = if spec.merge_lane_ids.contains(&lane) {
            merge_target(lane, &spec.merge_lane_ids, spec.lanes)
        } else {
            None
        };
        let start = rng.gen_range(spec.merge_window[0]..=spec.merge_window[1]);
        sims.push(Sim {
            x,
            v: v0,
            v0,
            from_lane: lane,
            to_lane: merge.unwrap_or(lane),
            merge_start: merge.map(|_| (start * FRAME_HZ).round() as i64),
        });
    }

    let mut states: Vec<Vec<VehicleState>> = vec![Vec::with_capacity(frames as usize); sims.len()];
    for frame in 0..frames {
        let lanes: Vec<u32> = sims.iter().map(|s| s.lane(frame)).collect();
        let xs: Vec<f64> = sims.iter().map(|s| s.x).collect();
        let nb = neighbours(&lanes, &xs);
        let mut next_v = Vec::with_capacity(sims.len());
        for (k, s) in sims.iter().enumerate() {
            let leader = nb[k].0.map(|l| (sims[l].x - s.x - VEHICLE_LENGTH, sims[l].v));
            let acc = idm_accel(spec, s.v, s.v0, leader);
            next_v.push((s.v + acc * FRAME_DT).max(0.0));
        }
        for (k, s) in sims.iter().enumerate() {
            let (y, lane_change) = s.lateral(frame);
            let id = |i: usize| (i + 1) as VehicleId;
            states[k].push(VehicleState {
                vehicle_id: id(k),
                frame,
                t: frame as f64 / FRAME_HZ,
                x: s.x,
                y,
                v: s.v,
                a: (next_v[k] - s.v) / FRAME_DT,
                lane_id: lanes[k],
                lane_norm: lanes[k] as f64 / spec.lanes as f64,
                lane_change,
                leader_id: nb[k].0.map(id),
                follower_id: nb[k].1.map(id),
                space_headway: nb[k].0.map(|l| sims[l].x - s.x),
            });
        }
        for (s, v) in sims.iter_mut().zip(next_v) {
            s.x += 0.5 * (s.v + v) * FRAME_DT;
            s.v = v;
        }
    }

    let trajectories = states
        .into_iter()
        .enumerate()
        .map(|(k, st)| Trajectory::new((k + 1) as VehicleId, st))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(SourceTag::Synthetic, spec.lanes, spec.merge_lane_ids.clone(), trajectories)
}

/// Generates the scenario and writes the ute CSV plus its `.meta` sidecar.
pub fn generate_to(spec: &ScenarioSpec, csv_path: &Path) -> Result<Dataset> {
    let ds = generate(spec)?;
    save_dataset(&ds, csv_path)?;
    Ok(ds)
}
