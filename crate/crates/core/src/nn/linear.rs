use super::tensor::{matvec, matvec_t_acc, outer_acc, Tensor};

/// Affine map `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Tensor::zeros(&[out_dim, in_dim]),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_dim()];
        matvec(&self.w.data, self.out_dim(), self.in_dim(), x, &mut y);
        for (yi, bi) in y.iter_mut().zip(&self.b.data) {
            *yi += bi;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        outer_acc(&mut grad.w.data, dy, x);
        for (g, d) in grad.b.data.iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![0.0; self.in_dim()];
        matvec_t_acc(&self.w.data, self.out_dim(), self.in_dim(), dy, &mut dx);
        dx
    }

    /// Parameter gradients only.
    pub fn backward_params(&self, x: &[f64], dy: &[f64], grad: &mut Linear) {
        outer_acc(&mut grad.w.data, dy, x);
        for (g, d) in grad.b.data.iter_mut().zip(dy) {
            *g += d;
        }
    }
}
