use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Minimum decrease that counts as an improvement for the plateau scheduler.
pub const PLATEAU_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

/// First and second moment estimates per parameter scalar.
#[derive(Debug, Clone)]
pub struct Adam {
    kind: OptimizerKind,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(kind: OptimizerKind, weight_decay: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).values.len()]).collect();
        Adam { kind, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; `grads` is in store order.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let values = params.values_mut(id);
            for (i, p) in values.iter_mut().enumerate() {
                let g = grads[k][i];
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                if self.kind == OptimizerKind::AdamW {
                    *p -= lr * self.weight_decay * *p;
                }
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        ReduceOnPlateau { factor, patience, best: f64::INFINITY, bad_epochs: 0 }
    }

    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - PLATEAU_THRESHOLD {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", &[3], vec![1.0, -2.0, 0.5]);
        s
    }

    #[test]
    fn zero_gradient_leaves_adam_params_unchanged() {
        let mut s = store();
        let before = s.clone();
        let mut opt = Adam::new(OptimizerKind::Adam, 0.0, &s);
        opt.update(&mut s, &[vec![0.0; 3]], 1e-3);
        assert_eq!(s, before);
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_the_sign() {
        let mut s = store();
        let mut opt = Adam::new(OptimizerKind::Adam, 0.0, &s);
        opt.update(&mut s, &[vec![0.3, -4.0, 0.0]], 0.1);
        let v = &s.get(s.id("w").unwrap()).values;
        // bias-corrected m/sqrt(v) is sign(g) on step one
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
        assert_eq!(v[2], 0.5);
    }

    #[test]
    fn adamw_decays_even_without_gradient() {
        let mut s = store();
        let mut opt = Adam::new(OptimizerKind::AdamW, 0.01, &s);
        opt.update(&mut s, &[vec![0.0; 3]], 0.1);
        assert!((s.get(s.id("w").unwrap()).values[0] - 0.999).abs() < 1e-12);
    }

    #[test]
    fn plateau_rule_trace() {
        let mut rop = ReduceOnPlateau::new(0.5, 2);
        let mut lr = 1.0;
        for loss in [3.0, 2.0, 1.0] {
            lr = rop.step(loss, lr);
        }
        assert_eq!(lr, 1.0);

        let mut rop = ReduceOnPlateau::new(0.5, 2);
        let mut lr = 1.0;
        let mut trace = vec![];
        for _ in 0..5 {
            lr = rop.step(1.0, lr);
            trace.push(lr);
        }
        // epoch 1 sets the best; epochs 2 and 3 are flat, so the cut lands at epoch 3
        assert_eq!(trace, vec![1.0, 1.0, 0.5, 0.5, 0.25]);
    }
}
