//! Adam without weight decay.

use crate::autograd::{Gradients, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = |p: &ParamStore| p.iter().map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Parameters without a gradient entry are treated as having a zero
    /// gradient (their moments still decay).
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(id);
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                let mj = &mut m.data_mut()[j];
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                let vj = &mut v.data_mut()[j];
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data()[j] / c1;
                let vhat = v.data()[j] / c2;
                p.data_mut()[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Matrix::row_vector(vec![1.0, -2.0, 0.5]));
        let mut g = Gradients::for_store(&ps);
        g.accumulate(id, &Matrix::row_vector(vec![3.0, -0.1, 0.0]));
        let mut opt = Adam::new(&ps, 0.01);
        opt.step(&mut ps, &g);
        let x = ps.get(id).data();
        assert!((x[0] - 0.99).abs() < 1e-9);
        assert!((x[1] + 1.99).abs() < 1e-9);
        assert_eq!(x[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Matrix::row_vector(vec![5.0, -3.0]));
        let mut opt = Adam::new(&ps, 0.1);
        for _ in 0..2000 {
            let mut g = Gradients::for_store(&ps);
            let x = ps.get(id).clone();
            g.accumulate(id, &Matrix::row_vector(vec![2.0 * (x.data()[0] - 1.0), 2.0 * x.data()[1]]));
            opt.step(&mut ps, &g);
        }
        let x = ps.get(id).data();
        assert!((x[0] - 1.0).abs() < 1e-3 && x[1].abs() < 1e-3);
    }

    #[test]
    fn clipping() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Matrix::row_vector(vec![0.0, 0.0]));
        let mut g = Gradients::for_store(&ps);
        g.accumulate(id, &Matrix::row_vector(vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 0.0), g.global_norm());
    }
}
