//! Lane-biased multi-head graph attention.

use super::tensor::{dot, elu, elu_grad, leaky_relu, leaky_relu_grad, matvec, matvec_t_acc, outer_acc, Tensor};
use crate::error::{Error, Result};
use crate::graph::EDGE_FEATURES;

pub const LANE_CODES: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Lane code stored in the last edge component.
pub fn lane_code(edge: &[f64; EDGE_FEATURES]) -> Result<usize> {
    let r = edge[EDGE_FEATURES - 1];
    if r.fract() == 0.0 && (0.0..LANE_CODES as f64).contains(&r) {
        Ok(r as usize)
    } else {
        Err(Error::invalid(format!("lane code {r} outside 0..=3")))
    }
}

/// Replaces the lane component `r` with `r + lambda[r]`.
pub fn apply_lane_bias(edge: &[f64; EDGE_FEATURES], lambda: &[f64]) -> Result<[f64; EDGE_FEATURES]> {
    let r = lane_code(edge)?;
    let mut out = *edge;
    out[EDGE_FEATURES - 1] = r as f64 + lambda[r];
    Ok(out)
}

/// Edge with an already biased feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GatEdge {
    pub src: usize,
    pub dst: usize,
    pub feature: [f64; EDGE_FEATURES],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatLayer {
    /// `H·D × in`, heads stacked by rows.
    pub w: Tensor,
    /// `H × D`, applied to the receiving node.
    pub att_dst: Tensor,
    /// `H × D`, applied to the sending node.
    pub att_src: Tensor,
    /// `H × D`, applied to the projected edge.
    pub att_edge: Tensor,
    /// `H·D × 5`
    pub w_edge: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

/// Attention inputs for one receiving node: the self-loop first, then
/// incoming edges.
#[derive(Clone, Debug)]
pub struct NodeAttention {
    /// `(source node, edge index)`; `None` marks the self-loop.
    pub slots: Vec<(usize, Option<usize>)>,
    /// Pre-activation scores, `slot * H + head`.
    pub raw: Vec<f64>,
    /// Normalised weights, `slot * H + head`.
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GatCache {
    pub x: Vec<Vec<f64>>,
    pub wh: Vec<Vec<f64>>,
    pub attention: Vec<NodeAttention>,
    pub edge_features: Vec<[f64; EDGE_FEATURES]>,
    pub self_feature: [f64; EDGE_FEATURES],
    pub xhat: Vec<Vec<f64>>,
    pub inv_std: Vec<f64>,
    /// LayerNorm output before ELU.
    pub y: Vec<Vec<f64>>,
    pub out: Vec<Vec<f64>>,
}

impl GatLayer {
    pub fn zeros(in_dim: usize, heads: usize, head_dim: usize) -> Self {
        let hd = heads * head_dim;
        Self {
            w: Tensor::zeros(&[hd, in_dim]),
            att_dst: Tensor::zeros(&[heads, head_dim]),
            att_src: Tensor::zeros(&[heads, head_dim]),
            att_edge: Tensor::zeros(&[heads, head_dim]),
            w_edge: Tensor::zeros(&[hd, EDGE_FEATURES]),
            ln_gamma: Tensor::zeros(&[hd]),
            ln_beta: Tensor::zeros(&[hd]),
        }
    }

    pub fn heads(&self) -> usize {
        self.att_dst.shape[0]
    }

    pub fn head_dim(&self) -> usize {
        self.att_dst.shape[1]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[0]
    }

    /// `W_eᵀ a_edge` for one head, so the edge term is a single dot product.
    pub fn edge_projection(&self, head: usize) -> [f64; EDGE_FEATURES] {
        let d = self.head_dim();
        let mut u = [0.0; EDGE_FEATURES];
        matvec_t_acc(
            &self.w_edge.data[head * d * EDGE_FEATURES..(head + 1) * d * EDGE_FEATURES],
            d,
            EDGE_FEATURES,
            self.att_edge.row(head),
            &mut u,
        );
        u
    }

    fn head_transform(&self, head: usize, h: &[f64]) -> Vec<f64> {
        let d = self.head_dim();
        let mut out = vec![0.0; d];
        matvec(
            &self.w.data[head * d * self.in_dim()..(head + 1) * d * self.in_dim()],
            d,
            self.in_dim(),
            h,
            &mut out,
        );
        out
    }

    /// Unnormalised attention score of `j -> i` for one head:
    /// `LeakyReLU(a_dst·W h_i + a_src·W h_j + a_edge·W_e e)`.
    pub fn attention_score(&self, head: usize, h_i: &[f64], h_j: &[f64], e: &[f64; EDGE_FEATURES]) -> f64 {
        leaky_relu(self.attention_raw(head, h_i, h_j, e))
    }

    fn attention_raw(&self, head: usize, h_i: &[f64], h_j: &[f64], e: &[f64; EDGE_FEATURES]) -> f64 {
        let d = self.head_dim();
        let wi = self.head_transform(head, h_i);
        let wj = self.head_transform(head, h_j);
        let mut we = vec![0.0; d];
        matvec(
            &self.w_edge.data[head * d * EDGE_FEATURES..(head + 1) * d * EDGE_FEATURES],
            d,
            EDGE_FEATURES,
            e,
            &mut we,
        );
        dot(self.att_dst.row(head), &wi) + dot(self.att_src.row(head), &wj) + dot(self.att_edge.row(head), &we)
    }

    /// Gradient of [`Self::attention_score`]. Returns `(dh_i, dh_j, de)`.
    pub fn attention_score_backward(
        &self,
        head: usize,
        h_i: &[f64],
        h_j: &[f64],
        e: &[f64; EDGE_FEATURES],
        d_score: f64,
        grad: &mut GatLayer,
    ) -> (Vec<f64>, Vec<f64>, [f64; EDGE_FEATURES]) {
        let d = self.head_dim();
        let n_in = self.in_dim();
        let draw = d_score * leaky_relu_grad(self.attention_raw(head, h_i, h_j, e));
        let wi = self.head_transform(head, h_i);
        let wj = self.head_transform(head, h_j);
        let we_rows = head * d * EDGE_FEATURES..(head + 1) * d * EDGE_FEATURES;
        let mut we = vec![0.0; d];
        matvec(&self.w_edge.data[we_rows.clone()], d, EDGE_FEATURES, e, &mut we);

        let (a_dst, a_src, a_edge) = (self.att_dst.row(head), self.att_src.row(head), self.att_edge.row(head));
        for k in 0..d {
            grad.att_dst.data[head * d + k] += draw * wi[k];
            grad.att_src.data[head * d + k] += draw * wj[k];
            grad.att_edge.data[head * d + k] += draw * we[k];
        }
        let dwi: Vec<f64> = a_dst.iter().map(|a| a * draw).collect();
        let dwj: Vec<f64> = a_src.iter().map(|a| a * draw).collect();
        let dwe: Vec<f64> = a_edge.iter().map(|a| a * draw).collect();
        let w_rows = head * d * n_in..(head + 1) * d * n_in;
        outer_acc(&mut grad.w.data[w_rows.clone()], &dwi, h_i);
        outer_acc(&mut grad.w.data[w_rows.clone()], &dwj, h_j);
        outer_acc(&mut grad.w_edge.data[we_rows.clone()], &dwe, e);
        let mut dh_i = vec![0.0; n_in];
        let mut dh_j = vec![0.0; n_in];
        matvec_t_acc(&self.w.data[w_rows.clone()], d, n_in, &dwi, &mut dh_i);
        matvec_t_acc(&self.w.data[w_rows], d, n_in, &dwj, &mut dh_j);
        let mut de = [0.0; EDGE_FEATURES];
        matvec_t_acc(&self.w_edge.data[we_rows], d, EDGE_FEATURES, &dwe, &mut de);
        (dh_i, dh_j, de)
    }

    /// Runs the layer on `x` (one row per node).
    pub fn forward(&self, x: &[Vec<f64>], edges: &[GatEdge], self_feature: &[f64; EDGE_FEATURES]) -> GatCache {
        let n = x.len();
        let (heads, d, hd) = (self.heads(), self.head_dim(), self.out_dim());
        let wh: Vec<Vec<f64>> = x
            .iter()
            .map(|xi| {
                let mut o = vec![0.0; hd];
                matvec(&self.w.data, hd, self.in_dim(), xi, &mut o);
                o
            })
            .collect();
        let s_dst: Vec<Vec<f64>> = wh
            .iter()
            .map(|w| (0..heads).map(|k| dot(self.att_dst.row(k), &w[k * d..(k + 1) * d])).collect())
            .collect();
        let s_src: Vec<Vec<f64>> = wh
            .iter()
            .map(|w| (0..heads).map(|k| dot(self.att_src.row(k), &w[k * d..(k + 1) * d])).collect())
            .collect();
        let u: Vec<[f64; EDGE_FEATURES]> = (0..heads).map(|k| self.edge_projection(k)).collect();

        let mut slots: Vec<Vec<(usize, Option<usize>)>> = (0..n).map(|i| vec![(i, None)]).collect();
        for (ei, e) in edges.iter().enumerate() {
            slots[e.dst].push((e.src, Some(ei)));
        }

        let mut attention = Vec::with_capacity(n);
        let mut concat = vec![vec![0.0; hd]; n];
        for (i, node_slots) in slots.into_iter().enumerate() {
            let m = node_slots.len();
            let mut raw = vec![0.0; m * heads];
            let mut alpha = vec![0.0; m * heads];
            for (s, &(j, ei)) in node_slots.iter().enumerate() {
                let feat = ei.map_or(self_feature, |ei| &edges[ei].feature);
                for k in 0..heads {
                    raw[s * heads + k] = s_dst[i][k] + s_src[j][k] + dot(&u[k], feat);
                }
            }
            for k in 0..heads {
                let mut max = f64::NEG_INFINITY;
                for s in 0..m {
                    max = max.max(leaky_relu(raw[s * heads + k]));
                }
                let mut total = 0.0;
                for s in 0..m {
                    let v = (leaky_relu(raw[s * heads + k]) - max).exp();
                    alpha[s * heads + k] = v;
                    total += v;
                }
                for s in 0..m {
                    alpha[s * heads + k] /= total;
                }
                let out = &mut concat[i][k * d..(k + 1) * d];
                for (s, &(j, _)) in node_slots.iter().enumerate() {
                    let a = alpha[s * heads + k];
                    for (o, w) in out.iter_mut().zip(&wh[j][k * d..(k + 1) * d]) {
                        *o += a * w;
                    }
                }
            }
            attention.push(NodeAttention {
                slots: node_slots,
                raw,
                alpha,
            });
        }

        let mut xhat = Vec::with_capacity(n);
        let mut inv_std = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for c in &concat {
            let mean = c.iter().sum::<f64>() / hd as f64;
            let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hd as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let xh: Vec<f64> = c.iter().map(|v| (v - mean) * inv).collect();
            let yi: Vec<f64> = xh
                .iter()
                .zip(&self.ln_gamma.data)
                .zip(&self.ln_beta.data)
                .map(|((x, g), b)| g * x + b)
                .collect();
            out.push(yi.iter().map(|v| elu(*v)).collect());
            xhat.push(xh);
            inv_std.push(inv);
            y.push(yi);
        }

        GatCache {
            x: x.to_vec(),
            wh,
            attention,
            edge_features: edges.iter().map(|e| e.feature).collect(),
            self_feature: *self_feature,
            xhat,
            inv_std,
            y,
            out,
        }
    }

    /// Returns `(dx, d_edge_features, d_self_feature)` and accumulates
    /// parameter gradients.
    pub fn backward(
        &self,
        cache: &GatCache,
        d_out: &[Vec<f64>],
        grad: &mut GatLayer,
    ) -> (Vec<Vec<f64>>, Vec<[f64; EDGE_FEATURES]>, [f64; EDGE_FEATURES]) {
        let n = cache.x.len();
        let (heads, d, hd) = (self.heads(), self.head_dim(), self.out_dim());
        let u: Vec<[f64; EDGE_FEATURES]> = (0..heads).map(|k| self.edge_projection(k)).collect();

        let mut d_wh = vec![vec![0.0; hd]; n];
        let mut d_sdst = vec![vec![0.0; heads]; n];
        let mut d_ssrc = vec![vec![0.0; heads]; n];
        let mut d_u = vec![[0.0; EDGE_FEATURES]; heads];
        let mut d_edges = vec![[0.0; EDGE_FEATURES]; cache.edge_features.len()];
        let mut d_self = [0.0; EDGE_FEATURES];

        for i in 0..n {
            let dy: Vec<f64> = d_out[i]
                .iter()
                .zip(&cache.y[i])
                .map(|(g, y)| g * elu_grad(*y))
                .collect();
            let mut dxhat = vec![0.0; hd];
            for c in 0..hd {
                grad.ln_gamma.data[c] += dy[c] * cache.xhat[i][c];
                grad.ln_beta.data[c] += dy[c];
                dxhat[c] = dy[c] * self.ln_gamma.data[c];
            }
            let m1 = dxhat.iter().sum::<f64>() / hd as f64;
            let m2 = dxhat.iter().zip(&cache.xhat[i]).map(|(a, b)| a * b).sum::<f64>() / hd as f64;
            let d_concat: Vec<f64> = dxhat
                .iter()
                .zip(&cache.xhat[i])
                .map(|(g, xh)| cache.inv_std[i] * (g - m1 - xh * m2))
                .collect();

            let att = &cache.attention[i];
            for k in 0..heads {
                let dagg = &d_concat[k * d..(k + 1) * d];
                let dalpha: Vec<f64> = att
                    .slots
                    .iter()
                    .map(|&(j, _)| dot(dagg, &cache.wh[j][k * d..(k + 1) * d]))
                    .collect();
                let weighted: f64 = att
                    .slots
                    .iter()
                    .enumerate()
                    .map(|(s, _)| att.alpha[s * heads + k] * dalpha[s])
                    .sum();
                for (s, &(j, ei)) in att.slots.iter().enumerate() {
                    let a = att.alpha[s * heads + k];
                    for (g, v) in d_wh[j][k * d..(k + 1) * d].iter_mut().zip(dagg) {
                        *g += a * v;
                    }
                    let draw = a * (dalpha[s] - weighted) * leaky_relu_grad(att.raw[s * heads + k]);
                    d_sdst[i][k] += draw;
                    d_ssrc[j][k] += draw;
                    let (feat, d_feat) = match ei {
                        Some(ei) => (&cache.edge_features[ei], &mut d_edges[ei]),
                        None => (&cache.self_feature, &mut d_self),
                    };
                    for c in 0..EDGE_FEATURES {
                        d_u[k][c] += draw * feat[c];
                        d_feat[c] += draw * u[k][c];
                    }
                }
            }
        }

        for i in 0..n {
            for k in 0..heads {
                let w = &cache.wh[i][k * d..(k + 1) * d];
                for c in 0..d {
                    grad.att_dst.data[k * d + c] += d_sdst[i][k] * w[c];
                    grad.att_src.data[k * d + c] += d_ssrc[i][k] * w[c];
                    d_wh[i][k * d + c] += d_sdst[i][k] * self.att_dst.data[k * d + c] + d_ssrc[i][k] * self.att_src.data[k * d + c];
                }
            }
        }

        for k in 0..heads {
            for c in 0..d {
                let row = (k * d + c) * EDGE_FEATURES;
                let we_row = &self.w_edge.data[row..row + EDGE_FEATURES];
                grad.att_edge.data[k * d + c] += dot(&d_u[k], we_row);
                let a = self.att_edge.data[k * d + c];
                for f in 0..EDGE_FEATURES {
                    grad.w_edge.data[row + f] += a * d_u[k][f];
                }
            }
        }

        let mut dx = vec![vec![0.0; self.in_dim()]; n];
        for i in 0..n {
            outer_acc(&mut grad.w.data, &d_wh[i], &cache.x[i]);
            matvec_t_acc(&self.w.data, hd, self.in_dim(), &d_wh[i], &mut dx[i]);
        }
        (dx, d_edges, d_self)
    }
}
