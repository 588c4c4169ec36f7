//! Single-layer LSTM and the bidirectional history encoder.

use super::linear::Linear;
use super::tensor::{matvec_acc, matvec_t_acc, outer_acc, sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::trajectory::NODE_FEATURES;

/// LSTM weights. Gate rows are stacked `[input, forget, cell, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    /// `4H × I`
    pub w_ih: Tensor,
    /// `4H × H`
    pub w_hh: Tensor,
    /// `4H`
    pub b: Tensor,
}

/// Values saved by one cell step.
#[derive(Clone, Debug)]
pub struct CellCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Activated gates `[i, f, g, o]`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

impl Lstm {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden, input]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.shape[1]
    }

    pub fn cell_forward(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> CellCache {
        let hd = self.hidden_dim();
        let mut z = self.b.data.clone();
        matvec_acc(&self.w_ih.data, 4 * hd, self.input_dim(), x, &mut z);
        matvec_acc(&self.w_hh.data, 4 * hd, hd, h_prev, &mut z);
        let mut gates = z;
        for (k, gv) in gates.iter_mut().enumerate() {
            *gv = if (2 * hd..3 * hd).contains(&k) {
                gv.tanh()
            } else {
                sigmoid(*gv)
            };
        }
        let mut c = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, g, o) = (gates[k], gates[hd + k], gates[2 * hd + k], gates[3 * hd + k]);
            c[k] = f * c_prev[k] + i * g;
            tanh_c[k] = c[k].tanh();
            h[k] = o * tanh_c[k];
        }
        CellCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates,
            c,
            tanh_c,
            h,
        }
    }

    /// Backpropagates `dh`, `dc` through one step. Returns
    /// `(dx, dh_prev, dc_prev)`.
    pub fn cell_backward(
        &self,
        cache: &CellCache,
        dh: &[f64],
        dc: &[f64],
        grad: &mut Lstm,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden_dim();
        let g = &cache.gates;
        let mut dz = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, gg, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
            let tc = cache.tanh_c[k];
            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
            dz[k] = dct * gg * i * (1.0 - i);
            dz[hd + k] = dct * cache.c_prev[k] * f * (1.0 - f);
            dz[2 * hd + k] = dct * i * (1.0 - gg * gg);
            dz[3 * hd + k] = dh[k] * tc * o * (1.0 - o);
            dc_prev[k] = dct * f;
        }
        outer_acc(&mut grad.w_ih.data, &dz, &cache.x);
        outer_acc(&mut grad.w_hh.data, &dz, &cache.h_prev);
        for (gb, d) in grad.b.data.iter_mut().zip(&dz) {
            *gb += d;
        }
        let mut dx = vec![0.0; self.input_dim()];
        matvec_t_acc(&self.w_ih.data, 4 * hd, self.input_dim(), &dz, &mut dx);
        let mut dh_prev = vec![0.0; hd];
        matvec_t_acc(&self.w_hh.data, 4 * hd, hd, &dz, &mut dh_prev);
        (dx, dh_prev, dc_prev)
    }

    /// Runs the cell over `xs` from zero state, keeping every step.
    pub fn run<'a>(&self, xs: impl Iterator<Item = &'a [f64]>) -> Vec<CellCache> {
        let hd = self.hidden_dim();
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut caches = Vec::new();
        for x in xs {
            let cache = self.cell_forward(x, &h, &c);
            h.clone_from(&cache.h);
            c.clone_from(&cache.c);
            caches.push(cache);
        }
        caches
    }

    /// Final hidden state only.
    pub fn run_final<'a>(&self, xs: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
        let hd = self.hidden_dim();
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut z = vec![0.0; 4 * hd];
        for x in xs {
            z.copy_from_slice(&self.b.data);
            matvec_acc(&self.w_ih.data, 4 * hd, self.input_dim(), x, &mut z);
            matvec_acc(&self.w_hh.data, 4 * hd, hd, &h, &mut z);
            for k in 0..hd {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[hd + k]);
                let g = z[2 * hd + k].tanh();
                let o = sigmoid(z[3 * hd + k]);
                c[k] = f * c[k] + i * g;
                h[k] = o * c[k].tanh();
            }
        }
        h
    }

    /// BPTT from a gradient on the last hidden state.
    pub fn run_backward(&self, caches: &[CellCache], dh_last: &[f64], grad: &mut Lstm) {
        let hd = self.hidden_dim();
        let mut dh = dh_last.to_vec();
        let mut dc = vec![0.0; hd];
        for cache in caches.iter().rev() {
            let (_, dhp, dcp) = self.cell_backward(cache, &dh, &dc, grad);
            dh = dhp;
            dc = dcp;
        }
    }
}

/// Bidirectional LSTM over a node history followed by a linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub fwd: Lstm,
    pub bwd: Lstm,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    pub fwd: Vec<CellCache>,
    pub bwd: Vec<CellCache>,
    pub concat: Vec<f64>,
}

impl Encoder {
    pub fn zeros(input: usize, hidden: usize, embed: usize) -> Self {
        Self {
            fwd: Lstm::zeros(input, hidden),
            bwd: Lstm::zeros(input, hidden),
            proj: Linear::zeros(embed, 2 * hidden),
        }
    }

    fn check(history: &[[f64; NODE_FEATURES]]) -> Result<()> {
        if history.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value in encoder input"));
        }
        Ok(())
    }

    /// Encodes one history without keeping intermediate state.
    pub fn encode(&self, history: &[[f64; NODE_FEATURES]]) -> Result<Vec<f64>> {
        Self::check(history)?;
        let mut concat = self.fwd.run_final(history.iter().map(|r| &r[..]));
        concat.extend(self.bwd.run_final(history.iter().rev().map(|r| &r[..])));
        Ok(self.proj.forward(&concat))
    }

    pub fn encode_cached(&self, history: &[[f64; NODE_FEATURES]]) -> Result<(Vec<f64>, EncoderCache)> {
        Self::check(history)?;
        let fwd = self.fwd.run(history.iter().map(|r| &r[..]));
        let bwd = self.bwd.run(history.iter().rev().map(|r| &r[..]));
        let hd = self.fwd.hidden_dim();
        let mut concat = Vec::with_capacity(2 * hd);
        concat.extend_from_slice(fwd.last().map_or(&vec![0.0; hd][..], |c| &c.h));
        concat.extend_from_slice(bwd.last().map_or(&vec![0.0; hd][..], |c| &c.h));
        let out = self.proj.forward(&concat);
        Ok((out, EncoderCache { fwd, bwd, concat }))
    }

    pub fn backward(&self, cache: &EncoderCache, d_out: &[f64], grad: &mut Encoder) {
        let d_concat = self.proj.backward(&cache.concat, d_out, &mut grad.proj);
        let hd = self.fwd.hidden_dim();
        self.fwd.run_backward(&cache.fwd, &d_concat[..hd], &mut grad.fwd);
        self.bwd.run_backward(&cache.bwd, &d_concat[hd..], &mut grad.bwd);
    }
}
