use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam_with(beta1: f64, beta2: f64) -> Self {
        OptimizerKind::Adam {
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One descent step. Shapes of `params` are never changed.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "optimizer got {} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
            }
        } else if self.first.len() != params.len() {
            return Err(Error::invalid("optimizer reused with a different parameter list"));
        }
        self.steps += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &gi), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        *v = momentum * *v + gi;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), s) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &gi), mi), si) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(s.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *si = beta2 * *si + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / c1;
                        let shat = *si / c2;
                        *w -= lr * mhat / (shat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        for kind in [OptimizerKind::Sgd { momentum: 0.9 }, OptimizerKind::adam()] {
            let mut params = vec![Tensor::from_vec(vec![1.5, -2.25, 3e-7])];
            let before = params.clone();
            let mut opt = Optimizer::new(kind, 0.0);
            for _ in 0..3 {
                opt.step(&mut params, &[Tensor::from_vec(vec![0.3, -1.0, 7.0])]).unwrap();
            }
            assert_eq!(params, before);
        }
    }

    #[test]
    fn sgd_descends_quadratic() {
        let mut p = vec![Tensor::from_vec(vec![4.0])];
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.25);
        for _ in 0..20 {
            let g = Tensor::from_vec(vec![2.0 * p[0].data()[0]]);
            opt.step(&mut p, &[g]).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1);
        assert!(opt.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
    }
}
