//! Per-horizon Gaussian decoder heads.

use super::linear::Linear;
use super::tensor::{elu, elu_grad};

pub const GAUSSIAN_CHANNELS: usize = 5;
pub const LOG_SIGMA_CLAMP: f64 = 10.0;
/// Keeps `rho` off ±1 where `tanh` rounds to exactly one.
pub const RHO_MAX: f64 = 1.0 - 1e-12;

/// One predicted step of a bivariate Gaussian over the displacement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianRow {
    pub mu_x: f64,
    pub mu_y: f64,
    /// Already clamped to `[-10, 10]`.
    pub log_sigma_x: f64,
    pub log_sigma_y: f64,
    pub rho: f64,
}

impl GaussianRow {
    pub fn sigma_x(&self) -> f64 {
        self.log_sigma_x.exp()
    }

    pub fn sigma_y(&self) -> f64 {
        self.log_sigma_y.exp()
    }

    pub fn mean(&self) -> [f64; 2] {
        [self.mu_x, self.mu_y]
    }
}

/// Gradient with respect to `(mu_x, mu_y, log_sigma_x, log_sigma_y, rho)`.
pub type RowGrad = [f64; GAUSSIAN_CHANNELS];

/// `embed → hidden (ELU) → steps·5`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    pub input: Vec<f64>,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub raw: Vec<f64>,
}

impl Decoder {
    pub fn zeros(embed: usize, hidden: usize, steps: usize) -> Self {
        Self {
            hidden: Linear::zeros(hidden, embed),
            out: Linear::zeros(steps * GAUSSIAN_CHANNELS, hidden),
        }
    }

    pub fn steps(&self) -> usize {
        self.out.out_dim() / GAUSSIAN_CHANNELS
    }

    pub fn forward(&self, h: &[f64]) -> (Vec<GaussianRow>, DecoderCache) {
        let z1 = self.hidden.forward(h);
        let a1: Vec<f64> = z1.iter().map(|v| elu(*v)).collect();
        let raw = self.out.forward(&a1);
        let rows = raw
            .chunks_exact(GAUSSIAN_CHANNELS)
            .map(|c| GaussianRow {
                mu_x: c[0],
                mu_y: c[1],
                log_sigma_x: c[2].clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP),
                log_sigma_y: c[3].clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP),
                rho: c[4].tanh().clamp(-RHO_MAX, RHO_MAX),
            })
            .collect();
        (
            rows,
            DecoderCache {
                input: h.to_vec(),
                z1,
                a1,
                raw,
            },
        )
    }

    /// Accumulates parameter gradients and returns `dL/dh`.
    pub fn backward(&self, cache: &DecoderCache, d_rows: &[RowGrad], grad: &mut Decoder) -> Vec<f64> {
        let mut d_raw = vec![0.0; cache.raw.len()];
        for ((d, g), raw) in d_raw
            .chunks_exact_mut(GAUSSIAN_CHANNELS)
            .zip(d_rows)
            .zip(cache.raw.chunks_exact(GAUSSIAN_CHANNELS))
        {
            d[0] = g[0];
            d[1] = g[1];
            for c in 2..4 {
                d[c] = if raw[c].abs() <= LOG_SIGMA_CLAMP { g[c] } else { 0.0 };
            }
            let rho = raw[4].tanh();
            d[4] = g[4] * (1.0 - rho * rho);
        }
        let d_a1 = self.out.backward(&cache.a1, &d_raw, &mut grad.out);
        let d_z1: Vec<f64> = d_a1.iter().zip(&cache.z1).map(|(g, z)| g * elu_grad(*z)).collect();
        self.hidden.backward(&cache.input, &d_z1, &mut grad.hidden)
    }
}
