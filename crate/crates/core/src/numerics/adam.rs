use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How weight decay enters the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// L2 penalty: `decay * θ` is added to the gradient before the moments.
    #[default]
    Coupled,
    /// AdamW-style: `θ ← θ − lr · decay · θ` applied outside the moments.
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, decay_mode: DecayMode::Coupled }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        AdamState { config, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "adam: state {} vs params {} vs grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        check_finite(grads)?;
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = c.lr / bc1;
        let inv_bc2_sqrt = 1.0 / bc2.sqrt();
        let coupled = match c.decay_mode {
            DecayMode::Coupled => c.weight_decay,
            DecayMode::Decoupled => 0.0,
        };
        let shrink = match c.decay_mode {
            DecayMode::Coupled => 1.0,
            DecayMode::Decoupled => 1.0 - c.lr * c.weight_decay,
        };
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = g + coupled * *p;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let denom = v.sqrt() * inv_bc2_sqrt + c.eps;
            *p = *p * shrink - step_size * *m / denom;
        }
        Ok(())
    }
}

/// Vectorizable finiteness check; only scans element-wise on failure.
fn check_finite(grads: &[f64]) -> Result<()> {
    let mut lanes = [0.0f64; 8];
    let chunks = grads.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (l, g) in lanes.iter_mut().zip(c) {
            *l += g * 0.0;
        }
    }
    let ok = lanes.iter().all(|l| *l == 0.0) && tail.iter().all(|g| g.is_finite());
    if ok {
        return Ok(());
    }
    let index = grads.iter().position(|g| !g.is_finite()).unwrap_or(0);
    Err(Error::NonFinite { what: "gradient", index })
}
