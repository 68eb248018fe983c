//! AdamW with decoupled weight decay and parameter groups.

use super::Tensor;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Parameters sharing a learning-rate multiplier and decay policy. Order of
/// groups and of params within a group is fixed by construction, which keeps
/// updates bit-deterministic.
pub struct ParamGroup {
    pub name: String,
    pub lr_multiplier: f64,
    pub apply_weight_decay: bool,
    pub params: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// Some gradient contained a non-finite value; no state was touched.
    SkippedNonFinite { param: String },
}

pub struct AdamW {
    pub config: AdamWConfig,
    groups: Vec<ParamGroup>,
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    steps_applied: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, groups: Vec<ParamGroup>) -> Self {
        let m = groups
            .iter()
            .map(|g| g.params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect())
            .collect();
        let v = groups
            .iter()
            .map(|g| g.params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect())
            .collect();
        AdamW { config, groups, m, v, steps_applied: 0 }
    }

    pub fn steps_applied(&self) -> u64 {
        self.steps_applied
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// Apply one update using the gradients currently stored on the params
    /// (missing gradient = zero). `lr_scale` multiplies the learning rate
    /// (warmup). Any non-finite gradient skips the whole step; gradients are
    /// cleared in both cases.
    pub fn step(&mut self, lr_scale: f64) -> StepOutcome {
        for g in &self.groups {
            for (name, p) in &g.params {
                if let Some(grad) = p.grad() {
                    if grad.iter().any(|v| !v.is_finite()) {
                        self.clear_grads();
                        return StepOutcome::SkippedNonFinite { param: name.clone() };
                    }
                }
            }
        }
        self.steps_applied += 1;
        let t = self.steps_applied;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for (gi, g) in self.groups.iter().enumerate() {
            let lr = c.lr * g.lr_multiplier * lr_scale;
            let wd = if g.apply_weight_decay { c.weight_decay } else { 0.0 };
            for (pi, (_, p)) in g.params.iter().enumerate() {
                let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
                let m = &mut self.m[gi][pi];
                let v = &mut self.v[gi][pi];
                p.update_data(|data| {
                    for i in 0..data.len() {
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        data[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * data[i]);
                    }
                });
                p.clear_grad();
            }
        }
        StepOutcome::Applied
    }

    pub fn clear_grads(&self) {
        for g in &self.groups {
            for (_, p) in &g.params {
                p.clear_grad();
            }
        }
    }
}
