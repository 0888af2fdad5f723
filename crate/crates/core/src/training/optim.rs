use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
    /// Steps over which the step size ramps linearly up to the scheduled rate.
    /// Counted per optimizer instance, so each phase warms up afresh.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 0,
        }
    }
}

/// Adam over a fixed subset of parameters. Parameters outside the subset are
/// never read or written, and no state is allocated for them.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub params: Vec<ParamId>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let zeros = || params.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            params,
            step: 0,
        }
    }

    /// Multiplier applied to the scheduled rate at the current step.
    pub fn warmup_factor(&self) -> f64 {
        let w = self.cfg.warmup_steps;
        if w == 0 { 1.0 } else { (self.step.max(1) as f64 / w as f64).min(1.0) }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = lr * self.warmup_factor();
        for (k, &id) in self.params.iter().enumerate() {
            let g = grads.get(id);
            let theta = &mut store.get_mut(id).data;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..theta.len() {
                let gi = g.map_or(0.0, |g| g[i]) + c.weight_decay * theta[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                theta[i] -= lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::new(vec![2], vec![1.0, -1.0]));
        let b = ps.add("b", Tensor::new(vec![1], vec![3.0]));
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, &ps, vec![a]);
        let mut g = Gradients::empty(2);
        g.grads[0] = Some(vec![0.5, -2.0]);
        g.grads[1] = Some(vec![1.0]);
        opt.step(&mut ps, &g, 0.1);
        assert!((ps.get(a).data[0] - 0.9).abs() < 1e-7);
        assert!((ps.get(a).data[1] + 0.9).abs() < 1e-7);
        assert_eq!(ps.get(b).data[0], 3.0);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::new(vec![2], vec![0.25, -4.0]));
        let before = ps.clone();
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, &ps, vec![a]);
        for _ in 0..5 {
            opt.step(&mut ps, &Gradients::empty(1), 1e-3);
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn warmup_ramps_the_first_steps() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::new(vec![1], vec![0.0]));
        let cfg = AdamConfig { weight_decay: 0.0, warmup_steps: 4, ..Default::default() };
        let mut opt = Adam::new(cfg, &ps, vec![a]);
        let mut g = Gradients::empty(1);
        g.grads[0] = Some(vec![1.0]);
        opt.step(&mut ps, &g, 1.0);
        assert!((ps.get(a).data[0] + 0.25).abs() < 1e-7);
        for _ in 0..5 {
            opt.step(&mut ps, &g, 1.0);
        }
        assert_eq!(opt.warmup_factor(), 1.0);
    }
}
