//! Displacement metrics, surrogate safety measures and report tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{build_sequences, compute_ttc, GraphParams, SceneSequence, TTC_SENTINEL};
use crate::nn::{predict_targets, Params, Standardizer};
use crate::trajectory::{Dataset, Horizon, VehicleId, FRAME_DT};

/// Thresholds for pairwise conflict detection.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmConfig {
    /// TTC below this is a violation (s).
    pub ttc_threshold: f64,
    /// DRAC above this is an exceedance (m/s²).
    pub drac_threshold: f64,
    /// Centre distance below this is a collision (m).
    pub collision_distance: f64,
    /// Use every ordered pair of predicted vehicles instead of graph edges.
    pub all_pairs: bool,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            ttc_threshold: 1.5,
            drac_threshold: 3.35,
            collision_distance: 2.0,
            all_pairs: false,
        }
    }
}

/// Evaluation setting tag recorded in reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Setting {
    PretrainTest,
    ZeroShot,
    FineTuned,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::PretrainTest, Setting::ZeroShot, Setting::FineTuned];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::PretrainTest => "pretrain-test",
            Setting::ZeroShot => "zero-shot",
            Setting::FineTuned => "fine-tuned",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown setting `{s}` (pretrain-test, zero-shot, fine-tuned)")))
    }
}

/// Absolute positions from the anchor position and displacements.
pub fn reconstruct_absolute(anchor: [f64; 2], displacements: &[[f64; 2]]) -> Vec<[f64; 2]> {
    displacements
        .iter()
        .map(|d| [anchor[0] + d[0], anchor[1] + d[1]])
        .collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Mean Euclidean error over steps.
pub fn ade(pred: &[[f64; 2]], target: &[[f64; 2]]) -> f64 {
    assert_eq!(pred.len(), target.len(), "prediction and target lengths differ");
    pred.iter().zip(target).map(|(p, t)| dist(*p, *t)).sum::<f64>() / pred.len() as f64
}

/// Euclidean error at the last step.
pub fn fde(pred: &[[f64; 2]], target: &[[f64; 2]]) -> f64 {
    assert_eq!(pred.len(), target.len(), "prediction and target lengths differ");
    dist(*pred.last().expect("nonempty"), *target.last().expect("nonempty"))
}

/// Predicted absolute positions of one vehicle over a horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedTrack {
    pub vehicle_id: VehicleId,
    /// Last observed position.
    pub anchor: [f64; 2],
    pub positions: Vec<[f64; 2]>,
}

impl PredictedTrack {
    /// Longitudinal speed at step `k` (1-based), differenced from the
    /// previous predicted position or the anchor.
    fn speed(&self, k: usize) -> f64 {
        let prev = if k == 1 { self.anchor[0] } else { self.positions[k - 2][0] };
        (self.positions[k - 1][0] - prev) / FRAME_DT
    }
}

/// Extremes of one ordered pair over a horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct PairOutcome {
    /// The vehicle whose conflict is measured.
    pub ego: VehicleId,
    pub other: VehicleId,
    pub min_ttc: f64,
    pub max_drac: f64,
    pub min_dist: f64,
}

/// Deceleration needed by a follower closing at `closing` m/s on a gap of
/// `gap` m; zero when not closing.
pub fn drac(gap: f64, closing: f64) -> f64 {
    if gap > 0.0 && closing > 0.0 {
        closing * closing / (2.0 * gap)
    } else {
        0.0
    }
}

/// Scans every step of an ordered pair. `ego` follows `other` when the
/// longitudinal gap `x_other - x_ego` is positive.
pub fn pair_outcome(ego: &PredictedTrack, other: &PredictedTrack) -> PairOutcome {
    let mut out = PairOutcome {
        ego: ego.vehicle_id,
        other: other.vehicle_id,
        min_ttc: TTC_SENTINEL,
        max_drac: 0.0,
        min_dist: f64::INFINITY,
    };
    for k in 1..=ego.positions.len().min(other.positions.len()) {
        let gap = other.positions[k - 1][0] - ego.positions[k - 1][0];
        let closing = ego.speed(k) - other.speed(k);
        out.min_ttc = out.min_ttc.min(compute_ttc(gap, closing));
        out.max_drac = out.max_drac.max(drac(gap, closing));
        out.min_dist = out.min_dist.min(dist(ego.positions[k - 1], other.positions[k - 1]));
    }
    out
}

/// Violation counts over a set of pair outcomes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SsmCounts {
    pub pairs: usize,
    pub ttc_violations: usize,
    pub drac_exceedances: usize,
    pub collisions: usize,
    /// Vehicles taking part in at least one pair.
    pub vehicles: usize,
    /// Vehicles taking part in at least one colliding pair.
    pub colliding_vehicles: usize,
}

impl SsmCounts {
    pub fn from_outcomes(outcomes: &[PairOutcome], cfg: &SsmConfig) -> Self {
        let mut involved = BTreeSet::new();
        let mut colliding = BTreeSet::new();
        let mut c = SsmCounts {
            pairs: outcomes.len(),
            ..Default::default()
        };
        for o in outcomes {
            involved.insert(o.ego);
            involved.insert(o.other);
            if o.min_ttc < cfg.ttc_threshold {
                c.ttc_violations += 1;
            }
            if o.max_drac > cfg.drac_threshold {
                c.drac_exceedances += 1;
            }
            if o.min_dist < cfg.collision_distance {
                c.collisions += 1;
                colliding.insert(o.ego);
                colliding.insert(o.other);
            }
        }
        c.vehicles = involved.len();
        c.colliding_vehicles = colliding.len();
        c
    }

    pub fn add(&mut self, o: &SsmCounts) {
        self.pairs += o.pairs;
        self.ttc_violations += o.ttc_violations;
        self.drac_exceedances += o.drac_exceedances;
        self.collisions += o.collisions;
        self.vehicles += o.vehicles;
        self.colliding_vehicles += o.colliding_vehicles;
    }

    /// `(collision %, TTC violation %, DRAC exceedance %)`, absent without
    /// pairs.
    pub fn rates(&self) -> Option<SsmRates> {
        if self.pairs == 0 {
            return None;
        }
        let pct = |n: usize, d: usize| 100.0 * n as f64 / d as f64;
        Some(SsmRates {
            collision_pct: pct(self.collisions, self.pairs),
            ttc_violation_pct: pct(self.ttc_violations, self.pairs),
            drac_exceedance_pct: pct(self.drac_exceedances, self.pairs),
            collision_vehicle_pct: pct(self.colliding_vehicles, self.vehicles),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsmRates {
    pub collision_pct: f64,
    pub ttc_violation_pct: f64,
    pub drac_exceedance_pct: f64,
    pub collision_vehicle_pct: f64,
}

/// Ordered pairs to score in one scene: `(ego index, other index)` into
/// `tracks`.
pub fn scene_pairs(
    tracks: &[PredictedTrack],
    edges: impl IntoIterator<Item = (VehicleId, VehicleId)>,
    all_pairs: bool,
) -> Vec<(usize, usize)> {
    if all_pairs {
        let n = tracks.len();
        return (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    }
    let index: BTreeMap<VehicleId, usize> = tracks.iter().enumerate().map(|(i, t)| (t.vehicle_id, i)).collect();
    edges
        .into_iter()
        .filter_map(|(ego, other)| Some((*index.get(&ego)?, *index.get(&other)?)))
        .collect()
}

/// Pair outcomes and rates for one scene.
pub fn ssm_rates(tracks: &[PredictedTrack], pairs: &[(usize, usize)], cfg: &SsmConfig) -> (Vec<PairOutcome>, SsmCounts) {
    let outcomes: Vec<PairOutcome> = pairs
        .iter()
        .map(|&(i, j)| pair_outcome(&tracks[i], &tracks[j]))
        .collect();
    let counts = SsmCounts::from_outcomes(&outcomes, cfg);
    (outcomes, counts)
}

/// Metrics of one horizon for one setting.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonMetrics {
    pub horizon: Horizon,
    pub ade: f64,
    pub fde: f64,
    pub ssm: Option<SsmRates>,
    pub n_samples: usize,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub setting: String,
    pub horizons: Vec<HorizonMetrics>,
}

/// A conflict-audit record.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub horizon: Horizon,
    pub outcome: PairOutcome,
}

#[derive(Default)]
struct SceneMetrics {
    ade_sum: [f64; 3],
    fde_sum: [f64; 3],
    samples: usize,
    counts: [SsmCounts; 3],
    pairs: Vec<PairRecord>,
}

fn evaluate_sequence(
    params: &Params,
    stats: &Standardizer,
    seq: &SceneSequence,
    vehicles: Option<&BTreeSet<VehicleId>>,
    cfg: &SsmConfig,
) -> Result<SceneMetrics> {
    let preds = predict_targets(params, stats, &seq.sequence)?;
    let keep: Vec<usize> = seq
        .windows
        .iter()
        .enumerate()
        .filter(|(_, w)| vehicles.map_or(true, |v| v.contains(&w.vehicle_id)))
        .map(|(i, _)| i)
        .collect();
    let mut m = SceneMetrics {
        samples: keep.len(),
        ..Default::default()
    };
    if keep.is_empty() {
        return Ok(m);
    }
    let anchor = seq.sequence.anchor();
    let edges: Vec<(VehicleId, VehicleId)> = anchor
        .edges
        .iter()
        .map(|e| (anchor.nodes[e.dst], anchor.nodes[e.src]))
        .collect();
    for h in Horizon::ALL {
        let hi = h.index();
        let mut tracks = Vec::with_capacity(keep.len());
        for &k in &keep {
            let w = &seq.windows[k];
            let a = w.anchor_position();
            let means: Vec<[f64; 2]> = preds[k].horizon(h).iter().map(|r| r.mean()).collect();
            let positions = reconstruct_absolute(a, &means);
            let truth = reconstruct_absolute(a, &w.target(h).steps);
            m.ade_sum[hi] += ade(&positions, &truth);
            m.fde_sum[hi] += fde(&positions, &truth);
            tracks.push(PredictedTrack {
                vehicle_id: w.vehicle_id,
                anchor: a,
                positions,
            });
        }
        let pairs = scene_pairs(&tracks, edges.iter().copied(), cfg.all_pairs);
        let (outcomes, counts) = ssm_rates(&tracks, &pairs, cfg);
        m.counts[hi] = counts;
        m.pairs.extend(outcomes.into_iter().map(|outcome| PairRecord { horizon: h, outcome }));
    }
    Ok(m)
}

/// Evaluates every target of `dataset` (restricted to `vehicles` when
/// given) at anchors spaced `stride` frames apart.
pub fn evaluate_dataset(
    params: &Params,
    stats: &Standardizer,
    dataset: &Dataset,
    graph: &GraphParams,
    vehicles: Option<&BTreeSet<VehicleId>>,
    stride: usize,
    cfg: &SsmConfig,
    setting: &str,
) -> Result<(MetricsReport, Vec<PairRecord>)> {
    let sequences = build_sequences(dataset, graph, stride);
    let results: Vec<Result<SceneMetrics>> = sequences
        .par_iter()
        .map(|s| evaluate_sequence(params, stats, s, vehicles, cfg))
        .collect();
    let mut total = SceneMetrics::default();
    for r in results {
        let m = r?;
        for h in 0..3 {
            total.ade_sum[h] += m.ade_sum[h];
            total.fde_sum[h] += m.fde_sum[h];
            total.counts[h].add(&m.counts[h]);
        }
        total.samples += m.samples;
        total.pairs.extend(m.pairs);
    }
    if total.samples == 0 {
        return Err(Error::InsufficientPopulation(format!(
            "no evaluation windows for setting {setting}"
        )));
    }
    let n = total.samples as f64;
    let horizons = Horizon::ALL
        .iter()
        .map(|&h| {
            let hi = h.index();
            HorizonMetrics {
                horizon: h,
                ade: total.ade_sum[hi] / n,
                fde: total.fde_sum[hi] / n,
                ssm: total.counts[hi].rates(),
                n_samples: total.samples,
                n_pairs: total.counts[hi].pairs,
            }
        })
        .collect();
    Ok((
        MetricsReport {
            setting: setting.to_string(),
            horizons,
        },
        total.pairs,
    ))
}

pub const REPORT_HEADER: &str =
    "horizon,setting,ade_m,fde_m,collision_pct,ttc_viol_pct,drac_exc_pct,collision_vehicle_pct,n_samples,n_pairs";

/// Writes reports grouped by horizon, settings in the given order.
pub fn emit_report<W: Write>(reports: &[MetricsReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for h in Horizon::ALL {
        for r in reports {
            for m in r.horizons.iter().filter(|m| m.horizon == h) {
                let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    h.label(),
                    r.setting,
                    m.ade,
                    m.fde,
                    opt(m.ssm.map(|s| s.collision_pct)),
                    opt(m.ssm.map(|s| s.ttc_violation_pct)),
                    opt(m.ssm.map(|s| s.drac_exceedance_pct)),
                    opt(m.ssm.map(|s| s.collision_vehicle_pct)),
                    m.n_samples,
                    m.n_pairs
                )?;
            }
        }
    }
    Ok(())
}

pub fn save_report(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    emit_report(reports, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`emit_report`].
pub fn load_report(path: &Path) -> Result<Vec<MetricsReport>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let mut by_setting: Vec<MetricsReport> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        let bad = |what: &str| Error::Row {
            path: path.to_path_buf(),
            line: line as u64 + 2,
            message: format!("bad {what}"),
        };
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize, what: &str| field(i).parse::<f64>().map_err(|_| bad(what));
        let opt = |i: usize, what: &str| -> Result<Option<f64>> {
            if field(i).is_empty() {
                Ok(None)
            } else {
                num(i, what).map(Some)
            }
        };
        let horizon = Horizon::ALL
            .into_iter()
            .find(|h| h.label() == field(0))
            .ok_or_else(|| bad("horizon"))?;
        let collision = opt(4, "collision_pct")?;
        let ssm = match collision {
            Some(collision_pct) => Some(SsmRates {
                collision_pct,
                ttc_violation_pct: num(5, "ttc_viol_pct")?,
                drac_exceedance_pct: num(6, "drac_exc_pct")?,
                collision_vehicle_pct: num(7, "collision_vehicle_pct")?,
            }),
            None => None,
        };
        let m = HorizonMetrics {
            horizon,
            ade: num(2, "ade_m")?,
            fde: num(3, "fde_m")?,
            ssm,
            n_samples: field(8).parse().map_err(|_| bad("n_samples"))?,
            n_pairs: field(9).parse().map_err(|_| bad("n_pairs"))?,
        };
        let setting = field(1).to_string();
        match by_setting.iter_mut().find(|r| r.setting == setting) {
            Some(r) => r.horizons.push(m),
            None => by_setting.push(MetricsReport {
                setting,
                horizons: vec![m],
            }),
        }
    }
    Ok(by_setting)
}

/// Writes `PAIR ego other horizon min_ttc max_drac min_dist` lines.
pub fn write_pair_dump<W: Write>(records: &[PairRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        let o = &r.outcome;
        writeln!(
            out,
            "PAIR {} {} {} {} {} {}",
            o.ego,
            o.other,
            r.horizon.label(),
            o.min_ttc,
            o.max_drac,
            o.min_dist
        )?;
    }
    Ok(())
}

/// Label carried by every row of the published reference table.
pub const REFERENCE_LABEL: &str = "reference (published, not computed)";

/// Published results for side-by-side display:
/// `(horizon, setting, ade, fde, collision %, ttc violation %, drac exceedance %)`.
pub const REFERENCE_TABLE: [(&str, &str, f64, f64, f64, f64, f64); 9] = [
    ("1s", "pretrain-test", 17.394, 15.339, 72.175, 82.121, 69.097),
    ("1s", "zero-shot", 4.125, 7.082, 95.257, 64.424, 31.960),
    ("1s", "fine-tuned", 0.865, 1.434, 95.022, 56.744, 32.353),
    ("3s", "pretrain-test", 19.748, 23.818, 78.889, 92.727, 87.345),
    ("3s", "zero-shot", 10.779, 21.090, 97.123, 86.520, 61.649),
    ("3s", "fine-tuned", 2.518, 4.784, 96.837, 74.759, 57.335),
    ("5s", "pretrain-test", 22.914, 29.163, 83.139, 95.038, 92.215),
    ("5s", "zero-shot", 17.408, 34.352, 97.483, 92.427, 73.313),
    ("5s", "fine-tuned", 5.034, 10.174, 97.012, 84.840, 72.593),
];

pub fn write_reference_table<W: Write>(mut out: W) -> std::io::Result<()> {
    writeln!(out, "horizon,setting,ade_m,fde_m,collision_pct,ttc_viol_pct,drac_exc_pct,source")?;
    for (h, s, a, f, c, t, d) in REFERENCE_TABLE {
        writeln!(out, "{h},{s},{a},{f},{c},{t},{d},{REFERENCE_LABEL}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(id: VehicleId, anchor: [f64; 2], positions: Vec<[f64; 2]>) -> PredictedTrack {
        PredictedTrack {
            vehicle_id: id,
            anchor,
            positions,
        }
    }

    #[test]
    fn reconstruction_examples() {
        assert_eq!(reconstruct_absolute([100.0, 3.0], &[[1.0, 0.0]]), vec![[101.0, 3.0]]);
        assert_eq!(reconstruct_absolute([5.0, 1.0], &[[0.0, 0.0]; 3]), vec![[5.0, 1.0]; 3]);
    }

    #[test]
    fn displacement_examples() {
        let zero = vec![[0.0, 0.0]; 4];
        assert_eq!(ade(&zero, &zero), 0.0);
        assert_eq!(ade(&[[3.0, 4.0]; 4], &zero), 5.0);
        assert_eq!(fde(&[[9.0, 9.0], [0.0, 0.0]], &[[0.0, 0.0], [0.0, 0.0]]), 0.0);
        assert_eq!(fde(&[[0.0, 2.0]], &[[0.0, 0.0]]), 2.0);
        // 3-step fixture: errors 1, 0, 2.
        let p = [[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]];
        let t = [[0.0; 2]; 3];
        assert_eq!(ade(&p, &t), 1.0);
        assert!(ade(&p, &t) <= 2.0);
        assert_eq!(fde(&p, &t), 2.0);
    }

    #[test]
    fn diverging_pair_has_no_conflict() {
        let a = track(1, [0.0, 0.0], (1..=10).map(|k| [-(k as f64), 0.0]).collect());
        let b = track(2, [50.0, 0.0], (1..=10).map(|k| [50.0 + k as f64, 0.0]).collect());
        let (_, c) = ssm_rates(&[a, b], &[(0, 1), (1, 0)], &SsmConfig::default());
        let r = c.rates().unwrap();
        assert_eq!((r.collision_pct, r.ttc_violation_pct, r.drac_exceedance_pct), (0.0, 0.0, 0.0));
    }

    #[test]
    fn closing_pair_violates_ttc_and_drac() {
        // Follower at 20 m/s, leader at 10 m/s, gap 10 m at the first step.
        let f = track(1, [0.0, 0.0], vec![[2.0, 0.0]]);
        let l = track(2, [11.0, 0.0], vec![[12.0, 0.0]]);
        let o = pair_outcome(&f, &l);
        assert_eq!(o.min_ttc, 1.0);
        assert_eq!(o.max_drac, 5.0);
        let (_, c) = ssm_rates(&[f, l], &[(0, 1)], &SsmConfig::default());
        let r = c.rates().unwrap();
        assert_eq!(r.ttc_violation_pct, 100.0);
        assert_eq!(r.drac_exceedance_pct, 100.0);
        assert_eq!(r.collision_pct, 0.0);
    }

    #[test]
    fn no_pairs_means_absent_rates() {
        assert_eq!(SsmCounts::default().rates(), None);
    }

    #[test]
    fn reference_rows() {
        let fine_1s = REFERENCE_TABLE.iter().find(|r| r.0 == "1s" && r.1 == "fine-tuned").unwrap();
        assert_eq!((fine_1s.2, fine_1s.3), (0.865, 1.434));
        let zs_3s = REFERENCE_TABLE.iter().find(|r| r.0 == "3s" && r.1 == "zero-shot").unwrap();
        assert_eq!(zs_3s.2, 10.779);
    }

    #[test]
    fn empty_report_is_header_only() {
        let mut buf = Vec::new();
        emit_report(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{REPORT_HEADER}\n"));
    }

    #[test]
    fn setting_tags() {
        for s in Setting::ALL {
            assert_eq!(s.as_str().parse::<Setting>().unwrap(), s);
        }
        assert!("paper".parse::<Setting>().is_err());
    }
}
