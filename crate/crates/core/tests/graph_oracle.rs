mod common;

use std::collections::BTreeSet;

use common::*;
use lagat::graph::{build_graph, GraphParams};

#[test]
fn graph_matches_pairwise_enumeration() {
    let merge = BTreeSet::from([4]);
    let mut r = rng(17);
    for scene in 0..300 {
        let n = 1 + scene % 40;
        let states = random_states(&mut r, n, 4);
        let rmax = [5.0, 20.0, 52.0][scene % 3];
        let refs: Vec<_> = states.iter().collect();
        let g = build_graph(&refs, &GraphParams::new(rmax, merge.clone()));
        assert_eq!(graph_edges(&g), oracle_edges(&states, rmax, &merge), "scene {scene}");
        assert!(g.nodes.windows(2).all(|w| w[0] < w[1]));
        assert!(g.edges.windows(2).all(|w| (w[0].dst, w[0].src) < (w[1].dst, w[1].src)));
    }
}

#[test]
fn graph_has_no_self_loops_and_is_symmetric() {
    let mut r = rng(3);
    for _ in 0..50 {
        let states = random_states(&mut r, 25, 3);
        let refs: Vec<_> = states.iter().collect();
        let g = build_graph(&refs, &GraphParams::new(30.0, BTreeSet::from([3])));
        let set: BTreeSet<(usize, usize)> = g.edges.iter().map(|e| (e.src, e.dst)).collect();
        for e in &g.edges {
            assert_ne!(e.src, e.dst);
            assert!(set.contains(&(e.dst, e.src)));
        }
    }
}
