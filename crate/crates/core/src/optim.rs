//! First-order optimizers over slot-indexed gradients.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    kind: OptimizerKind,
    lrs: Vec<F>,
    beta1: F,
    beta2: F,
    eps: F,
    m: Vec<Option<Array2<F>>>,
    v: Vec<Option<Array2<F>>>,
    t: i32,
}

impl<F: Scalar> Optimizer<F> {
    /// One learning rate per slot.
    pub fn new(kind: OptimizerKind, lrs: Vec<F>) -> Self {
        let n = lrs.len();
        Optimizer {
            kind,
            lrs,
            beta1: F::from_f64_lossy(0.9),
            beta2: F::from_f64_lossy(0.999),
            eps: F::from_f64_lossy(1e-8),
            m: vec![None; n],
            v: vec![None; n],
            t: 0,
        }
    }

    /// `backbone` slots get `lr_backbone`, the rest `lr_heads`.
    pub fn grouped(kind: OptimizerKind, n_slots: usize, backbone: usize, lr_backbone: F, lr_heads: F) -> Self {
        let lrs = (0..n_slots).map(|i| if i < backbone { lr_backbone } else { lr_heads }).collect();
        Self::new(kind, lrs)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, params: Vec<&mut Array2<F>>, grads: &Gradients<F>) {
        assert_eq!(params.len(), self.lrs.len(), "optimizer slot count mismatch");
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t);
        let bc2 = F::one() - self.beta2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let Some(g) = grads.get(i) else { continue };
            let lr = self.lrs[i];
            match self.kind {
                OptimizerKind::Sgd => p.scaled_add(-lr, g),
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                    let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
                    let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
                    Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                        *m = b1 * *m + (F::one() - b1) * g;
                        *v = b2 * *v + (F::one() - b2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    });
                }
            }
        }
    }
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before.
pub fn clip_global_norm<F: Scalar>(grads: &mut Gradients<F>, max_norm: F) -> F {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use ndarray::array;

    fn grads_of(p: &Array2<f64>) -> Gradients<f64> {
        let mut tape = Tape::new();
        let v = tape.param(p, 0);
        let sq = tape.mul(v, v);
        let l = tape.mean(sq);
        tape.backward(l, 1)
    }

    #[test]
    fn sgd_matches_hand_step() {
        let mut p = array![[1.0, -2.0]];
        let g = grads_of(&p);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, vec![0.1]);
        opt.step(vec![&mut p], &g);
        // gradient of mean(x^2) is x
        assert_eq!(p, array![[0.9, -1.8]]);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = array![[1.0, -2.0]];
        let g = grads_of(&p);
        let mut opt = Optimizer::new(OptimizerKind::Adam, vec![0.01]);
        opt.step(vec![&mut p], &g);
        assert!((p[[0, 0]] - 0.99).abs() < 1e-7);
        assert!((p[[0, 1]] + 1.99).abs() < 1e-7);
    }

    #[test]
    fn clipping() {
        let p = array![[3.0, 4.0]];
        let mut g = grads_of(&p);
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
