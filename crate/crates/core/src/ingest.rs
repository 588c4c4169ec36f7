//! Canonical CSV ingestion and harmonization to 10 Hz SI data.
//!
//! Two canonical schemas are accepted (column names are fixed; vendor exports
//! must be renamed before ingestion):
//!
//! ```text
//! ngsim: Vehicle_ID,Frame_ID,Global_Time_s,Local_X_ft,Local_Y_ft,v_Vel_fps,v_Acc_fpss,
//!        Lane_ID,Preceding,Following,Space_Headway_ft
//! ute:   track_id,timestamp_s,longitudinal_m,lateral_m,speed_ms,accel_ms2,lane_id,
//!        leader_id,follower_id,leader_distance_m,lane_change_flag
//! ```
//!
//! NGSIM follows its own axis naming: `Local_Y` runs along the carriageway and
//! becomes `x`, `Local_X` runs across it and becomes `y`. An empty lateral
//! field marks a missing value. `Preceding`/`Following` of 0 mean "none".
//!
//! [`harmonize`] runs: parse, unit conversion, resampling (ute only), global
//! longitudinal offset correction, lateral gap interpolation. Nothing is
//! smoothed or quality-filtered.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::trajectory::{Dataset, SourceTag, Trajectory, VehicleId, VehicleState, FRAME_HZ};

/// Feet to meters.
pub const KAPPA: f64 = 0.3048;

/// Longest run of missing lateral frames that may be interpolated.
pub const MAX_LATERAL_GAP: i64 = 3;

pub const NGSIM_COLUMNS: [&str; 11] = [
    "Vehicle_ID",
    "Frame_ID",
    "Global_Time_s",
    "Local_X_ft",
    "Local_Y_ft",
    "v_Vel_fps",
    "v_Acc_fpss",
    "Lane_ID",
    "Preceding",
    "Following",
    "Space_Headway_ft",
];

pub const UTE_COLUMNS: [&str; 11] = [
    "track_id",
    "timestamp_s",
    "longitudinal_m",
    "lateral_m",
    "speed_ms",
    "accel_ms2",
    "lane_id",
    "leader_id",
    "follower_id",
    "leader_distance_m",
    "lane_change_flag",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schema {
    Ngsim,
    Ute,
}

impl Schema {
    pub fn columns(self) -> &'static [&'static str; 11] {
        match self {
            Schema::Ngsim => &NGSIM_COLUMNS,
            Schema::Ute => &UTE_COLUMNS,
        }
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ngsim" => Ok(Schema::Ngsim),
            "ute" => Ok(Schema::Ute),
            other => Err(Error::invalid(format!(
                "unknown schema `{other}` (expected ngsim or ute)"
            ))),
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Ngsim => "ngsim",
            Schema::Ute => "ute",
        })
    }
}

/// One parsed data row, still in source units.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub schema: Schema,
    pub vehicle_id: VehicleId,
    /// Source frame number (NGSIM only).
    pub source_frame: Option<i64>,
    /// Timestamp in seconds.
    pub t: f64,
    /// Grid frame, assigned by resampling.
    pub frame: Option<i64>,
    pub x: f64,
    /// `None` when the lateral value is missing.
    pub y: Option<f64>,
    pub v: f64,
    pub a: f64,
    pub lane_id: u32,
    pub leader_id: Option<VehicleId>,
    pub follower_id: Option<VehicleId>,
    pub headway: Option<f64>,
    /// Lane-change flag as recorded (ute only).
    pub lane_change: Option<bool>,
}

/// Counters collected while harmonizing one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HarmonizationReport {
    pub records_in: usize,
    pub records_out: usize,
    /// Runs of missing lateral values filled by interpolation.
    pub interpolated_gaps: usize,
    /// Individual lateral values filled by interpolation.
    pub interpolated_records: usize,
    pub dropped_trajectories: usize,
    /// Longitudinal minimum subtracted from every record, when negative.
    pub x_min_applied: Option<f64>,
}

impl fmt::Display for HarmonizationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records_in = {}", self.records_in)?;
        writeln!(f, "records_out = {}", self.records_out)?;
        writeln!(f, "interpolated_gaps = {}", self.interpolated_gaps)?;
        writeln!(f, "interpolated_records = {}", self.interpolated_records)?;
        writeln!(f, "dropped_trajectories = {}", self.dropped_trajectories)?;
        match self.x_min_applied {
            Some(x) => writeln!(f, "x_min_applied = {x}"),
            None => writeln!(f, "x_min_applied = none"),
        }
    }
}

/// Dataset metadata that cannot be inferred from the trajectory file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub source_tag: SourceTag,
    pub lane_max: u32,
    pub merge_lane_ids: BTreeSet<u32>,
}

impl DatasetMeta {
    /// Reads a `key = value` sidecar with `lane_max`, `merge_lane_ids` and an
    /// optional `source_tag`.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lane_max = None;
        let mut merge = BTreeSet::new();
        let mut tag = SourceTag::Synthetic;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row_err = |message: String| Error::Row {
                path: path.to_path_buf(),
                line: n as u64 + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| row_err(format!("expected key = value, got `{line}`")))?;
            let value = value.trim();
            match key.trim() {
                "lane_max" => {
                    lane_max = Some(value.parse().map_err(|_| row_err(format!("bad lane_max `{value}`")))?)
                }
                "merge_lane_ids" => merge = parse_lane_list(value).map_err(|e| row_err(e.to_string()))?,
                "source_tag" => tag = value.parse().map_err(|e: Error| row_err(e.to_string()))?,
                other => return Err(row_err(format!("unknown key `{other}`"))),
            }
        }
        Ok(Self {
            source_tag: tag,
            lane_max: lane_max.ok_or_else(|| Error::invalid(format!("{}: lane_max missing", path.display())))?,
            merge_lane_ids: merge,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let merge: Vec<String> = self.merge_lane_ids.iter().map(u32::to_string).collect();
        let text = format!(
            "source_tag = {}\nlane_max = {}\nmerge_lane_ids = {}\n",
            self.source_tag.as_str(),
            self.lane_max,
            merge.join(",")
        );
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Parses a comma-separated lane list; an empty string is the empty set.
pub fn parse_lane_list(value: &str) -> Result<BTreeSet<u32>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>()
                .map_err(|_| Error::invalid(format!("bad lane id `{s}`")))
        })
        .collect()
}

/// Reads a canonical CSV file.
pub fn parse_csv(path: &Path, schema: Schema) -> Result<Vec<RawRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(file, path, schema)
}

/// Parses canonical CSV from any reader; `path` is used in diagnostics only.
pub fn parse_reader<R: Read>(reader: R, path: &Path, schema: Schema) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .clone();
    let mut idx = [0usize; 11];
    for (slot, name) in idx.iter_mut().zip(schema.columns()) {
        *slot = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: (*name).to_string(),
            })?;
    }

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |k: usize| row.get(idx[k]).unwrap_or("");
        let cols = schema.columns();
        let err = |k: usize, raw: &str| Error::Row {
            path: path.to_path_buf(),
            line,
            message: format!("column `{}`: cannot parse `{raw}`", cols[k]),
        };
        let num = |k: usize| -> Result<f64> {
            let raw = field(k);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(k, raw))
        };
        let opt_num = |k: usize| -> Result<Option<f64>> {
            if field(k).is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        let int = |k: usize| -> Result<i64> {
            let raw = field(k);
            raw.parse::<i64>().map_err(|_| err(k, raw))
        };
        let opt_int = |k: usize| -> Result<Option<i64>> {
            if field(k).is_empty() {
                Ok(None)
            } else {
                int(k).map(Some)
            }
        };
        let lane = |k: usize| -> Result<u32> {
            let raw = field(k);
            raw.parse::<u32>()
                .ok()
                .filter(|l| *l >= 1)
                .ok_or_else(|| err(k, raw))
        };

        let record = match schema {
            Schema::Ngsim => {
                let nonzero = |v: Option<i64>| v.filter(|id| *id != 0);
                RawRecord {
                    schema,
                    vehicle_id: int(0)?,
                    source_frame: Some(int(1)?),
                    t: num(2)?,
                    frame: None,
                    x: num(4)?,
                    y: opt_num(3)?,
                    v: num(5)?,
                    a: num(6)?,
                    lane_id: lane(7)?,
                    leader_id: nonzero(opt_int(8)?),
                    follower_id: nonzero(opt_int(9)?),
                    headway: opt_num(10)?,
                    lane_change: None,
                }
            }
            Schema::Ute => {
                let flag = match field(10) {
                    "0" => false,
                    "1" => true,
                    raw => return Err(err(10, raw)),
                };
                RawRecord {
                    schema,
                    vehicle_id: int(0)?,
                    source_frame: None,
                    t: num(1)?,
                    frame: None,
                    x: num(2)?,
                    y: opt_num(3)?,
                    v: num(4)?,
                    a: num(5)?,
                    lane_id: lane(6)?,
                    leader_id: opt_int(7)?,
                    follower_id: opt_int(8)?,
                    headway: opt_num(9)?,
                    lane_change: Some(flag),
                }
            }
        };
        out.push(record);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Row {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

/// Converts NGSIM feet to meters. Ute records pass through untouched.
pub fn convert_units(records: &mut [RawRecord]) {
    for r in records.iter_mut().filter(|r| r.schema == Schema::Ngsim) {
        r.x *= KAPPA;
        r.y = r.y.map(|y| y * KAPPA);
        r.v *= KAPPA;
        r.a *= KAPPA;
        r.headway = r.headway.map(|h| h * KAPPA);
    }
}

/// Maps a timestamp onto the 10 Hz grid: `(t̃, frame)`.
pub fn grid_point(t: f64) -> (f64, i64) {
    let snapped = (t * FRAME_HZ).round() / FRAME_HZ;
    (snapped, (snapped * FRAME_HZ).round() as i64)
}

/// Resamples to 10 Hz, keeping one record per vehicle per grid point.
///
/// When several raw records land on one grid point the one closest to it in
/// time wins, ties going to the earlier record. Retained records keep their
/// full state and are re-stamped with the grid time.
pub fn resample_10hz(records: Vec<RawRecord>) -> Vec<RawRecord> {
    // (distance to grid point, raw timestamp, record)
    let mut best: BTreeMap<(VehicleId, i64), (f64, f64, RawRecord)> = BTreeMap::new();
    for mut r in records {
        let (snapped, frame) = grid_point(r.t);
        let dist = (r.t - snapped).abs();
        let raw_t = r.t;
        r.t = snapped;
        r.frame = Some(frame);
        let replace = match best.get(&(r.vehicle_id, frame)) {
            None => true,
            Some((d, kept_t, _)) => dist < *d || (dist == *d && raw_t < *kept_t),
        };
        if replace {
            best.insert((r.vehicle_id, frame), (dist, raw_t, r));
        }
    }
    best.into_values().map(|(_, _, r)| r).collect()
}

/// Shifts every record by the dataset-wide longitudinal minimum when that
/// minimum is negative. Returns the minimum that was subtracted.
pub fn offset_correct(records: &mut [RawRecord]) -> Option<f64> {
    let x_min = records.iter().map(|r| r.x).fold(f64::INFINITY, f64::min);
    if !(x_min < 0.0) {
        return None;
    }
    for r in records.iter_mut() {
        r.x -= x_min;
    }
    Some(x_min)
}

/// Outcome of lateral gap filling for one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub enum LateralOutcome {
    /// Trajectory kept; counts of filled gaps and filled records.
    Filled { gaps: usize, records: usize },
    /// A gap was too long or touched a trajectory boundary.
    Excluded,
}

/// Fills missing lateral values of one vehicle's frame-ordered records by
/// linear interpolation in frame index.
///
/// Runs spanning more than [`MAX_LATERAL_GAP`] frames, or runs with no
/// observed value on one side, exclude the trajectory.
pub fn interpolate_lateral(track: &mut [RawRecord]) -> LateralOutcome {
    let frame_of = |r: &RawRecord| r.frame.expect("frames assigned before interpolation");
    let mut gaps = 0;
    let mut filled = 0;
    let mut i = 0;
    while i < track.len() {
        if track[i].y.is_some() {
            i += 1;
            continue;
        }
        let start = i;
        while i < track.len() && track[i].y.is_none() {
            i += 1;
        }
        if start == 0 || i == track.len() {
            return LateralOutcome::Excluded;
        }
        let span = frame_of(&track[i - 1]) - frame_of(&track[start]) + 1;
        if span > MAX_LATERAL_GAP {
            return LateralOutcome::Excluded;
        }
        let (f0, y0) = (frame_of(&track[start - 1]), track[start - 1].y.unwrap());
        let (f1, y1) = (frame_of(&track[i]), track[i].y.unwrap());
        for r in &mut track[start..i] {
            let w = (frame_of(r) - f0) as f64 / (f1 - f0) as f64;
            r.y = Some(y0 + w * (y1 - y0));
        }
        gaps += 1;
        filled += i - start;
    }
    LateralOutcome::Filled {
        gaps,
        records: filled,
    }
}

/// Full harmonization of a file.
pub fn harmonize(path: &Path, schema: Schema, meta: &DatasetMeta) -> Result<(Dataset, HarmonizationReport)> {
    let records = parse_csv(path, schema)?;
    harmonize_records(records, schema, meta)
}

/// Harmonizes already-parsed records.
pub fn harmonize_records(
    mut records: Vec<RawRecord>,
    schema: Schema,
    meta: &DatasetMeta,
) -> Result<(Dataset, HarmonizationReport)> {
    if let Some(r) = records.iter().find(|r| r.schema != schema) {
        return Err(Error::invalid(format!(
            "vehicle {}: {} record in a {schema} dataset",
            r.vehicle_id, r.schema
        )));
    }
    let mut report = HarmonizationReport {
        records_in: records.len(),
        ..Default::default()
    };

    convert_units(&mut records);
    let mut records = match schema {
        Schema::Ute => resample_10hz(records),
        Schema::Ngsim => {
            // 10 Hz source: the grid mapping is the identity apart from
            // collapsing exact duplicates.
            let mut seen = BTreeSet::new();
            let mut kept = Vec::with_capacity(records.len());
            for mut r in records {
                let (t, frame) = grid_point(r.t);
                r.t = t;
                r.frame = Some(frame);
                if seen.insert((r.vehicle_id, frame)) {
                    kept.push(r);
                }
            }
            kept.sort_by_key(|r| (r.vehicle_id, r.frame));
            kept
        }
    };
    report.x_min_applied = offset_correct(&mut records);

    let mut by_vehicle: BTreeMap<VehicleId, Vec<RawRecord>> = BTreeMap::new();
    for r in records {
        by_vehicle.entry(r.vehicle_id).or_default().push(r);
    }

    let mut trajectories = Vec::with_capacity(by_vehicle.len());
    for (id, mut track) in by_vehicle {
        match interpolate_lateral(&mut track) {
            LateralOutcome::Excluded => {
                report.dropped_trajectories += 1;
                continue;
            }
            LateralOutcome::Filled { gaps, records } => {
                report.interpolated_gaps += gaps;
                report.interpolated_records += records;
            }
        }
        let mut prev_lane = None;
        let states = track
            .into_iter()
            .map(|r| {
                let lane_change = r.lane_change.unwrap_or_else(|| {
                    prev_lane.is_some_and(|p| p != r.lane_id)
                });
                prev_lane = Some(r.lane_id);
                VehicleState {
                    vehicle_id: id,
                    frame: r.frame.unwrap(),
                    t: r.t,
                    x: r.x,
                    y: r.y.unwrap(),
                    v: r.v,
                    a: r.a,
                    lane_id: r.lane_id,
                    lane_norm: r.lane_id as f64 / meta.lane_max as f64,
                    lane_change,
                    leader_id: r.leader_id,
                    follower_id: r.follower_id,
                    space_headway: r.headway,
                }
            })
            .collect::<Vec<_>>();
        report.records_out += states.len();
        trajectories.push(Trajectory::new(id, states)?);
    }

    let dataset = Dataset::new(
        meta.source_tag,
        meta.lane_max,
        meta.merge_lane_ids.clone(),
        trajectories,
    )?;
    Ok((dataset, report))
}

/// Writes a dataset in the ute canonical schema. Values are written with
/// shortest round-trip formatting, so re-reading reproduces them exactly.
pub fn write_ute_csv<W: Write>(dataset: &Dataset, out: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{}", UTE_COLUMNS.join(","))?;
    for s in dataset.states() {
        let opt_id = |v: Option<VehicleId>| v.map(|v| v.to_string()).unwrap_or_default();
        let headway = s.space_headway.map(|h| h.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.vehicle_id,
            s.t,
            s.x,
            s.y,
            s.v,
            s.a,
            s.lane_id,
            opt_id(s.leader_id),
            opt_id(s.follower_id),
            headway,
            u8::from(s.lane_change)
        )?;
    }
    w.flush()
}

/// Writes a harmonized dataset plus its `.meta` sidecar.
pub fn save_dataset(dataset: &Dataset, csv_path: &Path) -> Result<PathBuf> {
    let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    write_ute_csv(dataset, file).map_err(|e| Error::io(csv_path, e))?;
    let meta_path = meta_path_for(csv_path);
    DatasetMeta {
        source_tag: dataset.source_tag,
        lane_max: dataset.lane_max,
        merge_lane_ids: dataset.merge_lane_ids.clone(),
    }
    .write(&meta_path)?;
    Ok(meta_path)
}

/// Loads a dataset previously written by [`save_dataset`].
pub fn load_dataset(csv_path: &Path) -> Result<Dataset> {
    let meta = DatasetMeta::read(&meta_path_for(csv_path))?;
    harmonize(csv_path, Schema::Ute, &meta).map(|(d, _)| d)
}

/// `foo.csv` → `foo.meta`.
pub fn meta_path_for(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta")
}
