//! Momentum-free adaptive first-order optimizer over flat parameter buffers.
//!
//! Per parameter: v <- rho v + (1 - rho) g^2; p <- p - lr g / (sqrt(v) + eps).
//! Parameters with zero gradient (unsampled supernet candidates, running
//! statistics) never move.

use std::collections::HashMap;

pub const LEARNING_RATE: f64 = 1e-3;

pub struct AdaptiveOpt {
    pub lr: f64,
    rho: f64,
    eps: f64,
    state: HashMap<String, Vec<f64>>,
}

impl AdaptiveOpt {
    pub fn new(lr: f64) -> AdaptiveOpt {
        AdaptiveOpt { lr, rho: 0.9, eps: 1e-8, state: HashMap::new() }
    }

    pub fn step(&mut self, unit_id: &str, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let v = self
            .state
            .entry(unit_id.to_string())
            .or_insert_with(|| vec![0.0; params.len()]);
        debug_assert_eq!(v.len(), params.len());
        for i in 0..params.len() {
            let g = grads[i];
            v[i] = self.rho * v[i] + (1.0 - self.rho) * g * g;
            if g != 0.0 {
                params[i] -= self.lr * g / (v[i].sqrt() + self.eps);
            }
        }
    }
}
