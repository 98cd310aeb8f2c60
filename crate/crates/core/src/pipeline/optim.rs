//! Adam with bias correction, one state per parameter group.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
    /// Steps skipped because of a non-finite gradient.
    pub skipped: u32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Parameter increments for `grads`, or `None` (and the state untouched)
    /// when any gradient is non-finite.
    pub fn delta(&mut self, grads: &[f64], lr: f64, p: &AdamParams) -> Option<Vec<f64>> {
        assert_eq!(grads.len(), self.m.len(), "gradient length does not match optimizer state");
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::debug!("adam: non-finite gradient, step skipped ({} so far)", self.skipped);
            return None;
        }
        self.t += 1;
        let b1 = 1.0 - p.beta1.powi(self.t as i32);
        let b2 = 1.0 - p.beta2.powi(self.t as i32);
        Some(
            grads
                .iter()
                .enumerate()
                .map(|(k, &g)| {
                    self.m[k] = p.beta1 * self.m[k] + (1.0 - p.beta1) * g;
                    self.v[k] = p.beta2 * self.v[k] + (1.0 - p.beta2) * g * g;
                    let mh = self.m[k] / b1;
                    let vh = self.v[k] / b2;
                    -lr * mh / (vh.sqrt() + p.eps)
                })
                .collect(),
        )
    }

    /// Applies one step in place; returns false when skipped.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, p: &AdamParams) -> bool {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
        match self.delta(grads, lr, p) {
            Some(d) => {
                for (x, dx) in params.iter_mut().zip(d) {
                    *x += dx;
                }
                true
            }
            None => false,
        }
    }
}
