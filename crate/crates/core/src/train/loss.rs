//! Gaussian NLL, auxiliary displacement loss and the predicted-TTC hinge.

use crate::error::{Error, Result};
use crate::graph::compute_ttc;
use crate::nn::{GaussianRow, Prediction, RowGrad};
use crate::trajectory::{Horizon, Window, FRAME_DT};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Lower bound on `1 - rho²`.
pub const RHO_FLOOR: f64 = 1e-6;
/// Weight of the auxiliary displacement term.
pub const ADE_WEIGHT: f64 = 0.5;
/// Predicted TTC below this is penalised (s).
pub const TTC_PENALTY_THRESHOLD: f64 = 3.0;

/// Negative log-likelihood of `target` under one Gaussian row, with its
/// gradient with respect to `(mu_x, mu_y, log_sigma_x, log_sigma_y, rho)`.
pub fn nll(row: &GaussianRow, target: [f64; 2]) -> Result<(f64, RowGrad)> {
    let vals = [row.mu_x, row.mu_y, row.log_sigma_x, row.log_sigma_y, row.rho, target[0], target[1]];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in NLL input"));
    }
    let (sx, sy, rho) = (row.sigma_x(), row.sigma_y(), row.rho);
    let dx = target[0] - row.mu_x;
    let dy = target[1] - row.mu_y;
    let raw_q = 1.0 - rho * rho;
    let floored = raw_q < RHO_FLOOR;
    let q = if floored { RHO_FLOOR } else { raw_q };
    let cross = dx * dy / (sx * sy);
    let z = dx * dx / (sx * sx) + dy * dy / (sy * sy) - 2.0 * rho * cross;
    let value = z / (2.0 * q) + row.log_sigma_x + row.log_sigma_y + 0.5 * q.ln() + LN_2PI;

    let inv = 1.0 / (2.0 * q);
    let d_mu_x = -inv * (2.0 * dx / (sx * sx) - 2.0 * rho * dy / (sx * sy));
    let d_mu_y = -inv * (2.0 * dy / (sy * sy) - 2.0 * rho * dx / (sx * sy));
    let d_ls_x = inv * (-2.0 * dx * dx / (sx * sx) + 2.0 * rho * cross) + 1.0;
    let d_ls_y = inv * (-2.0 * dy * dy / (sy * sy) + 2.0 * rho * cross) + 1.0;
    let mut d_rho = inv * (-2.0 * cross);
    if !floored {
        d_rho += z * rho / (q * q) - rho / q;
    }
    Ok((value, [d_mu_x, d_mu_y, d_ls_x, d_ls_y, d_rho]))
}

/// Mean Euclidean distance between predicted means and targets, with the
/// gradient on the means. Zero-length errors contribute no gradient.
pub fn ade_aux(rows: &[GaussianRow], targets: &[[f64; 2]]) -> (f64, Vec<RowGrad>) {
    assert_eq!(rows.len(), targets.len(), "prediction and target lengths differ");
    let n = rows.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(rows.len());
    for (r, t) in rows.iter().zip(targets) {
        let ex = r.mu_x - t[0];
        let ey = r.mu_y - t[1];
        let d = (ex * ex + ey * ey).sqrt();
        total += d;
        let mut g = [0.0; 5];
        if d > 0.0 {
            g[0] = ex / (d * n);
            g[1] = ey / (d * n);
        }
        grads.push(g);
    }
    (total / n, grads)
}

/// Per-horizon loss components and their combination.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub nll: [f64; 3],
    pub ade: [f64; 3],
    pub ttc_penalty: f64,
    pub combined: f64,
}

impl LossBreakdown {
    pub fn combine(nll: [f64; 3], ade: [f64; 3], ttc_penalty: f64, lambda2: f64) -> f64 {
        let per_h: f64 = (0..3).map(|h| nll[h] + ADE_WEIGHT * ade[h]).sum::<f64>() / 3.0;
        if lambda2 == 0.0 {
            per_h
        } else {
            per_h + lambda2 * ttc_penalty
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        for h in 0..3 {
            self.nll[h] += other.nll[h];
            self.ade[h] += other.ade[h];
        }
        self.ttc_penalty += other.ttc_penalty;
        self.combined += other.combined;
    }

    pub fn scaled(&self, factor: f64) -> LossBreakdown {
        LossBreakdown {
            nll: self.nll.map(|v| v * factor),
            ade: self.ade.map(|v| v * factor),
            ttc_penalty: self.ttc_penalty * factor,
            combined: self.combined * factor,
        }
    }
}

/// Loss of one prediction against its window, without the TTC term, and
/// the gradient on every predicted row (per horizon, per step).
pub fn window_loss(pred: &Prediction, window: &Window) -> Result<(LossBreakdown, Vec<Vec<RowGrad>>)> {
    let mut out = LossBreakdown::default();
    let mut grads = Vec::with_capacity(3);
    for h in Horizon::ALL {
        let rows = pred.horizon(h);
        let targets = &window.target(h).steps;
        let t = rows.len() as f64;
        let (ade, ade_g) = ade_aux(rows, targets);
        let mut nll_sum = 0.0;
        let mut g = Vec::with_capacity(rows.len());
        for ((row, target), ag) in rows.iter().zip(targets).zip(&ade_g) {
            let (v, ng) = nll(row, *target)?;
            nll_sum += v;
            let mut step = [0.0; 5];
            for c in 0..5 {
                step[c] = (ng[c] / t + ADE_WEIGHT * ag[c]) / 3.0;
            }
            g.push(step);
        }
        out.nll[h.index()] = nll_sum / t;
        out.ade[h.index()] = ade;
        grads.push(g);
    }
    out.combined = LossBreakdown::combine(out.nll, out.ade, 0.0, 0.0);
    Ok((out, grads))
}

/// Hinge on predicted time to collision, averaged over steps and ordered
/// pairs `(follower, leader)` per horizon and then over horizons.
///
/// `tracks[k]` is the anchor position and prediction of node `k`. Speeds are
/// finite differences of predicted positions, starting from the anchor.
/// Returns the penalty and its gradient per node, horizon and step.
pub fn ttc_penalty(tracks: &[([f64; 2], &Prediction)], pairs: &[(usize, usize)]) -> (f64, Vec<Vec<Vec<RowGrad>>>) {
    let mut grads: Vec<Vec<Vec<RowGrad>>> = tracks
        .iter()
        .map(|(_, p)| p.horizons.iter().map(|rows| vec![[0.0; 5]; rows.len()]).collect())
        .collect();
    if pairs.is_empty() {
        return (0.0, grads);
    }
    let mut total = 0.0;
    for h in Horizon::ALL {
        let hi = h.index();
        let steps = h.steps();
        let weight = 1.0 / (3.0 * (pairs.len() * steps) as f64 * TTC_PENALTY_THRESHOLD);
        let mut sum = 0.0;
        for &(i, j) in pairs {
            let (ai, pi) = tracks[i];
            let (aj, pj) = tracks[j];
            let xi = |k: usize| if k == 0 { ai[0] } else { ai[0] + pi.horizons[hi][k - 1].mu_x };
            let xj = |k: usize| if k == 0 { aj[0] } else { aj[0] + pj.horizons[hi][k - 1].mu_x };
            for k in 1..=steps {
                let gap = xj(k) - xi(k);
                let closure = (xi(k) - xi(k - 1)) / FRAME_DT - (xj(k) - xj(k - 1)) / FRAME_DT;
                let ttc = compute_ttc(gap, closure);
                if ttc >= TTC_PENALTY_THRESHOLD {
                    continue;
                }
                sum += TTC_PENALTY_THRESHOLD - ttc;
                // d(penalty)/d(ttc) = -weight
                let d_gap = -weight / closure;
                let d_closure = weight * gap / (closure * closure);
                grads[j][hi][k - 1][0] += d_gap;
                grads[i][hi][k - 1][0] -= d_gap;
                grads[i][hi][k - 1][0] += d_closure / FRAME_DT;
                grads[j][hi][k - 1][0] -= d_closure / FRAME_DT;
                if k > 1 {
                    grads[i][hi][k - 2][0] -= d_closure / FRAME_DT;
                    grads[j][hi][k - 2][0] += d_closure / FRAME_DT;
                }
            }
        }
        total += sum * weight;
    }
    (total, grads)
}
