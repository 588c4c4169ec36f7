//! Z-score statistics for node and edge features.
//!
//! The first four node channels (`x, y, v, a`) and the first four edge
//! channels (`dx, dy, dv, ttc`) are standardised; `lane_norm`, the lane
//! change flag and the lane code pass through unchanged.

use crate::graph::EDGE_FEATURES;
use crate::trajectory::NODE_FEATURES;

pub const SCALED: usize = 4;
const MIN_STD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub node_mean: [f64; SCALED],
    pub node_std: [f64; SCALED],
    pub edge_mean: [f64; SCALED],
    pub edge_std: [f64; SCALED],
}

impl Default for Standardizer {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Default)]
struct Welford {
    n: f64,
    mean: [f64; SCALED],
    m2: [f64; SCALED],
}

impl Welford {
    fn push(&mut self, row: &[f64]) {
        self.n += 1.0;
        for c in 0..SCALED {
            let delta = row[c] - self.mean[c];
            self.mean[c] += delta / self.n;
            self.m2[c] += delta * (row[c] - self.mean[c]);
        }
    }

    fn finish(&self) -> ([f64; SCALED], [f64; SCALED]) {
        if self.n == 0.0 {
            return ([0.0; SCALED], [1.0; SCALED]);
        }
        let std = self.m2.map(|m| {
            let s = (m / self.n).sqrt();
            if s.is_finite() && s > MIN_STD {
                s
            } else {
                1.0
            }
        });
        (self.mean, std)
    }
}

impl Standardizer {
    pub fn identity() -> Self {
        Self {
            node_mean: [0.0; SCALED],
            node_std: [1.0; SCALED],
            edge_mean: [0.0; SCALED],
            edge_std: [1.0; SCALED],
        }
    }

    /// Population mean and standard deviation of each scaled channel.
    /// Channels with (near) zero spread keep a unit scale.
    pub fn fit<'a>(
        nodes: impl IntoIterator<Item = &'a [f64; NODE_FEATURES]>,
        edges: impl IntoIterator<Item = &'a [f64; EDGE_FEATURES]>,
    ) -> Self {
        let mut wn = Welford::default();
        nodes.into_iter().for_each(|r| wn.push(r));
        let mut we = Welford::default();
        edges.into_iter().for_each(|r| we.push(r));
        let (node_mean, node_std) = wn.finish();
        let (edge_mean, edge_std) = we.finish();
        Self {
            node_mean,
            node_std,
            edge_mean,
            edge_std,
        }
    }

    pub fn node(&self, f: &[f64; NODE_FEATURES]) -> [f64; NODE_FEATURES] {
        let mut out = *f;
        for c in 0..SCALED {
            out[c] = (f[c] - self.node_mean[c]) / self.node_std[c];
        }
        out
    }

    pub fn edge(&self, e: &[f64; EDGE_FEATURES]) -> [f64; EDGE_FEATURES] {
        let mut out = *e;
        for c in 0..SCALED {
            out[c] = (e[c] - self.edge_mean[c]) / self.edge_std[c];
        }
        out
    }

    /// The 16 statistics in manifest order.
    pub fn to_values(&self) -> Vec<f64> {
        [self.node_mean, self.node_std, self.edge_mean, self.edge_std].concat()
    }

    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.len() != 4 * SCALED {
            return None;
        }
        let take = |i: usize| -> [f64; SCALED] {
            let mut a = [0.0; SCALED];
            a.copy_from_slice(&values[i * SCALED..(i + 1) * SCALED]);
            a
        };
        Some(Self {
            node_mean: take(0),
            node_std: take(1),
            edge_mean: take(2),
            edge_std: take(3),
        })
    }
}
