mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use lagat::eval::{ade, fde, reconstruct_absolute, scene_pairs, ssm_rates, PredictedTrack, SsmConfig};
use lagat::graph::{build_graph, compute_ttc, GraphParams, TTC_SENTINEL};
use lagat::ingest::{
    convert_units, harmonize_records, offset_correct, parse_reader, resample_10hz, write_ute_csv, DatasetMeta,
    RawRecord, Schema,
};
use lagat::nn::gat::GatEdge;
use lagat::nn::model::{forward, Mode};
use lagat::nn::{Checkpoint, CheckpointMeta, ParamStore, Params};
use lagat::synth::{generate, ScenarioSpec};
use lagat::trajectory::{
    extract_windows, split_vehicles, Dataset, Horizon, Trajectory, VehicleId, MAX_FUTURE, T_OBS,
};
use proptest::prelude::*;

fn synth(vehicles: usize, duration: f64, seed: u64) -> Dataset {
    generate(&ScenarioSpec {
        vehicles,
        duration,
        seed,
        ..ScenarioSpec::default()
    })
    .unwrap()
}

fn raw(schema: Schema, id: VehicleId, t: f64, x: f64, y: Option<f64>) -> RawRecord {
    RawRecord {
        schema,
        vehicle_id: id,
        source_frame: None,
        t,
        frame: None,
        x,
        y,
        v: 10.0,
        a: 0.5,
        lane_id: 1,
        leader_id: None,
        follower_id: None,
        headway: Some(12.0),
        lane_change: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_is_partition(n in 3usize..60, seed in 0u64..1000) {
        let ds = synth(n, 1.0, seed);
        let s = split_vehicles(&ds, [0.7, 0.15, 0.15], seed).unwrap();
        let all: BTreeSet<VehicleId> = ds.vehicle_ids().collect();
        let union: BTreeSet<VehicleId> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        prop_assert_eq!(union, all);
        prop_assert!(s.train.is_disjoint(&s.val));
        prop_assert!(s.train.is_disjoint(&s.test));
        prop_assert!(s.val.is_disjoint(&s.test));
    }

    #[test]
    fn windows_have_fixed_shape_and_reconstruct(seed in 0u64..1000, drops in proptest::collection::vec(0usize..140, 0..4)) {
        let ds = synth(2, 14.0, seed);
        let traj = ds.trajectories().next().unwrap();
        let states: Vec<_> = traj
            .states()
            .iter()
            .enumerate()
            .filter(|(k, _)| !drops.contains(k))
            .map(|(_, s)| s.clone())
            .collect();
        let gapped = Trajectory::new(traj.vehicle_id(), states).unwrap();
        for w in extract_windows(&gapped, 7) {
            prop_assert_eq!(w.history.len(), T_OBS);
            for h in Horizon::ALL {
                prop_assert_eq!(w.target(h).steps.len(), h.steps());
            }
            let abs = reconstruct_absolute(w.anchor_position(), &w.target(Horizon::S5).steps);
            for (k, p) in abs.iter().enumerate() {
                let truth = traj.at_frame(w.anchor_frame + 1 + k as i64).unwrap();
                prop_assert!((p[0] - truth.x).abs() < 1e-9 && (p[1] - truth.y).abs() < 1e-9);
            }
        }
        prop_assert!(MAX_FUTURE == Horizon::S5.steps());
    }

    #[test]
    fn unit_conversion_is_linear(x in -500.0f64..500.0, y in -20.0f64..20.0, scale in -4.0f64..4.0) {
        let mut a = vec![raw(Schema::Ngsim, 1, 0.0, scale * x, Some(scale * y))];
        let mut b = vec![raw(Schema::Ngsim, 1, 0.0, x, Some(y))];
        convert_units(&mut a);
        convert_units(&mut b);
        prop_assert!((a[0].x - scale * b[0].x).abs() <= 1e-12 * (1.0 + a[0].x.abs()));
        prop_assert!((a[0].y.unwrap() - scale * b[0].y.unwrap()).abs() <= 1e-12 * (1.0 + a[0].y.unwrap().abs()));
    }

    #[test]
    fn resampled_frames_strictly_increase(ts in proptest::collection::vec((1i64..4, 0.0f64..20.0), 1..200)) {
        let records: Vec<RawRecord> = ts.iter().map(|&(id, t)| raw(Schema::Ute, id, t, 1.0, Some(1.0))).collect();
        let n_in = records.len();
        let out = resample_10hz(records);
        prop_assert!(out.len() <= n_in);
        let mut last: BTreeMap<VehicleId, i64> = BTreeMap::new();
        for r in &out {
            let f = r.frame.unwrap();
            if let Some(prev) = last.insert(r.vehicle_id, f) {
                prop_assert!(f > prev);
            }
        }
    }

    #[test]
    fn offset_leaves_nonnegative_minimum(xs in proptest::collection::vec(-100.0f64..100.0, 1..50)) {
        let mut records: Vec<RawRecord> = xs.iter().map(|&x| raw(Schema::Ute, 1, 0.0, x, Some(0.0))).collect();
        let before = xs.iter().copied().fold(f64::INFINITY, f64::min);
        offset_correct(&mut records);
        let after = records.iter().map(|r| r.x).fold(f64::INFINITY, f64::min);
        prop_assert!(after == 0.0 || (after == before && before >= 0.0));
    }

    #[test]
    fn harmonize_is_idempotent(seed in 0u64..1000) {
        let ds = synth(8, 3.0, seed);
        let meta = DatasetMeta {
            source_tag: ds.source_tag,
            lane_max: ds.lane_max,
            merge_lane_ids: ds.merge_lane_ids.clone(),
        };
        let once = roundtrip(&ds, &meta);
        let twice = roundtrip(&once, &meta);
        for (a, b) in once.trajectories().zip(twice.trajectories()) {
            prop_assert_eq!(a.len(), b.len());
            for (sa, sb) in a.states().iter().zip(b.states()) {
                prop_assert_eq!(sa.frame, sb.frame);
                prop_assert!((sa.x - sb.x).abs() < 1e-12 && (sa.y - sb.y).abs() < 1e-12);
                prop_assert!((sa.v - sb.v).abs() < 1e-12 && (sa.a - sb.a).abs() < 1e-12);
                prop_assert_eq!(sa.lane_id, sb.lane_id);
                prop_assert_eq!(sa.lane_change, sb.lane_change);
            }
        }
    }

    #[test]
    fn ttc_is_bounded_and_decreasing(dx in -200.0f64..200.0, c1 in -50.0f64..50.0, c2 in -50.0f64..50.0) {
        for c in [c1, c2] {
            let t = compute_ttc(dx, c);
            prop_assert!((0.0..=TTC_SENTINEL).contains(&t));
        }
        // Larger closing speed means sooner contact.
        let (lo, hi) = if c1 < c2 { (c1, c2) } else { (c2, c1) };
        if dx > 0.0 && lo > 0.0 {
            prop_assert!(compute_ttc(dx, hi) <= compute_ttc(dx, lo));
        }
    }

    #[test]
    fn edge_features_are_antisymmetric(seed in 0u64..10_000, n in 2usize..30) {
        let states = random_states(&mut rng(seed), n, 4);
        let refs: Vec<_> = states.iter().collect();
        let g = build_graph(&refs, &GraphParams::new(25.0, BTreeSet::from([4])));
        let by_pair: BTreeMap<(usize, usize), [f64; 5]> =
            g.edges.iter().map(|e| ((e.src, e.dst), e.feature.to_array())).collect();
        for (&(s, d), f) in &by_pair {
            let back = by_pair[&(d, s)];
            for k in 0..3 {
                prop_assert_eq!(f[k], -back[k]);
            }
        }
    }

    #[test]
    fn graph_is_relabel_invariant(seed in 0u64..10_000, n in 1usize..30) {
        let mut r = rng(seed);
        let states = random_states(&mut r, n, 4);
        let mut targets: Vec<VehicleId> = (5000..5000 + n as VehicleId).collect();
        use rand::seq::SliceRandom;
        targets.shuffle(&mut r);
        let map: BTreeMap<VehicleId, VehicleId> = states.iter().map(|s| s.vehicle_id).zip(targets).collect();
        let relabel = |id: Option<VehicleId>| id.map(|i| *map.get(&i).unwrap_or(&i));
        let mut renamed = states.clone();
        for s in &mut renamed {
            s.vehicle_id = map[&s.vehicle_id];
            s.leader_id = relabel(s.leader_id);
            s.follower_id = relabel(s.follower_id);
        }
        let merge = BTreeSet::from([4]);
        let a = graph_edges(&build_graph(&states.iter().collect::<Vec<_>>(), &GraphParams::new(25.0, merge.clone())));
        let b = graph_edges(&build_graph(&renamed.iter().collect::<Vec<_>>(), &GraphParams::new(25.0, merge)));
        let mapped: EdgeMap = a.into_iter().map(|((s, d), v)| ((map[&s], map[&d]), v)).collect();
        prop_assert_eq!(mapped, b);
    }

    #[test]
    fn displacement_errors_nonnegative(p in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..20),
                                       q in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 20)) {
        let pred: Vec<[f64; 2]> = p.iter().map(|&(a, b)| [a, b]).collect();
        let target: Vec<[f64; 2]> = q[..pred.len()].iter().map(|&(a, b)| [a, b]).collect();
        prop_assert!(ade(&pred, &target) >= 0.0);
        prop_assert!(fde(&pred, &target) >= 0.0);
        prop_assert_eq!(ade(&pred[..1], &target[..1]), fde(&pred[..1], &target[..1]));
    }

    #[test]
    fn ssm_invariant_under_relabel_and_translation(seed in 0u64..10_000, n in 2usize..15, shift in (-64.0f64..64.0, -8.0f64..8.0)) {
        let cfg = SsmConfig::default();
        let mut r = rng(seed);
        let tracks = random_tracks(&mut r, n, 30);
        let pairs = scene_pairs(&tracks, std::iter::empty(), true);
        let (base_out, base) = ssm_rates(&tracks, &pairs, &cfg);

        let relabeled: Vec<PredictedTrack> = tracks
            .iter()
            .map(|t| PredictedTrack { vehicle_id: t.vehicle_id + 100_000, ..t.clone() })
            .collect();
        let (_, c) = ssm_rates(&relabeled, &pairs, &cfg);
        prop_assert_eq!(&c, &base);

        let moved: Vec<PredictedTrack> = tracks
            .iter()
            .map(|t| PredictedTrack {
                vehicle_id: t.vehicle_id,
                anchor: [t.anchor[0] + shift.0, t.anchor[1] + shift.1],
                positions: t.positions.iter().map(|p| [p[0] + shift.0, p[1] + shift.1]).collect(),
            })
            .collect();
        let (out, c) = ssm_rates(&moved, &pairs, &cfg);
        prop_assert_eq!(c.rates().map(|r| r.collision_pct), base.rates().map(|r| r.collision_pct));
        prop_assert_eq!(c, base);
        for (a, b) in out.iter().zip(&base_out) {
            prop_assert!((a.min_dist - b.min_dist).abs() < 1e-6);
            prop_assert!((a.max_drac - b.max_drac).abs() < 1e-6 * (1.0 + b.max_drac));
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..10_000, n in 1usize..20) {
        let mut r = rng(seed);
        let layer = random_gat(&mut r, 6, 3, 2);
        let x: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut r, 6, 2.0)).collect();
        let edges: Vec<GatEdge> = random_edges(&mut r, n, 0.3)
            .into_iter()
            .map(|(src, dst)| GatEdge { src, dst, feature: random_vec(&mut r, 5, 2.0).try_into().unwrap() })
            .collect();
        let cache = layer.forward(&x, &edges, &[0.0; 5]);
        for node in &cache.attention {
            for k in 0..3 {
                let total: f64 = (0..node.slots.len()).map(|s| node.alpha[s * 3 + k]).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_outputs_finite_and_bounded(seed in 0u64..10_000, n in 1usize..8) {
        let mut r = rng(seed);
        let mut params = Params::init(&tiny_config(), seed);
        for (_, t) in params.tensors_mut() {
            randomize(t, &mut r, 3.0);
        }
        let scene = random_scene(&mut r, n, 5);
        let decode: Vec<usize> = (0..n).collect();
        let pass = forward(&params, &scene, &decode, Mode::Inference).unwrap();
        for p in &pass.predictions {
            for row in p.horizons.iter().flatten() {
                prop_assert!(row.mu_x.is_finite() && row.mu_y.is_finite());
                for s in [row.sigma_x(), row.sigma_y()] {
                    prop_assert!(s >= (-10.0f64).exp() && s <= 10.0f64.exp());
                }
                prop_assert!(row.rho > -1.0 && row.rho < 1.0);
            }
        }
    }

    #[test]
    fn checkpoint_round_trips(seed in 0u64..1000) {
        let store = ParamStore::init(tiny_config(), seed);
        let ckpt = Checkpoint {
            store,
            stats: identity_stats(),
            meta: CheckpointMeta { phase: "pretrain".into(), best_epoch: 3, rmax: 41.5 },
        };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.store.params.tensors().len(), ckpt.store.params.tensors().len());
    }
}

fn roundtrip(ds: &Dataset, meta: &DatasetMeta) -> Dataset {
    let mut buf = Vec::new();
    write_ute_csv(ds, &mut buf).unwrap();
    let records = parse_reader(&buf[..], std::path::Path::new("mem.csv"), Schema::Ute).unwrap();
    harmonize_records(records, Schema::Ute, meta).unwrap().0
}
