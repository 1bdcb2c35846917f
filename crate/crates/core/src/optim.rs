use serde::{Deserialize, Serialize};

use crate::agent::{AgentParams, Gradient};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn for_params(lr: f64, p: &AgentParams) -> Self {
        Self::new(lr, p.theta.len())
    }

    /// Descend along `g`.
    pub fn update(&mut self, params: &mut AgentParams, g: &Gradient) {
        self.update_masked(params, g, |_| true);
    }

    /// Descend along `g`, touching only coordinates for which `active` holds.
    pub fn update_masked(&mut self, params: &mut AgentParams, g: &Gradient, active: impl Fn(usize) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (th, &gi)) in params.theta.iter_mut().zip(&g.data).enumerate() {
            if !active(i) {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            *th -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
