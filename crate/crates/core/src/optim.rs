use crate::error::{Error, Result};
use crate::model::ParamStore;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, warmup_steps: 0 }
    }
}

impl AdamWConfig {
    /// Linear warmup to the base rate, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Decoupled-weight-decay Adam. State is keyed by parameter name; frozen
/// parameters are skipped even when a gradient is present, and parameters
/// absent from the gradient map (disconnected this step) are left untouched.
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Slot>,
    step_count: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, state: BTreeMap::new(), step_count: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        if grads.is_empty() {
            return Err(Error::MissingGrad("no gradients populated".into()));
        }
        let lr = self.config.lr_at(self.step_count);
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.config.beta1.powi(t);
        let bc2 = 1.0 - self.config.beta2.powi(t);
        for (name, g) in grads {
            if params.is_frozen(name) {
                continue;
            }
            let tensor = params
                .get_mut(name)
                .ok_or_else(|| Error::MissingGrad(format!("gradient for unknown parameter {name}")))?;
            if tensor.data.len() != g.len() {
                return Err(Error::Shape(format!(
                    "gradient length {} for parameter {} of {}",
                    g.len(),
                    name,
                    tensor.data.len()
                )));
            }
            let slot = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Slot { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            let c = &self.config;
            for i in 0..g.len() {
                slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g[i];
                slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                let w = &mut tensor.data[i];
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(name: &str, data: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::new(vec![data.len()], data).unwrap().with_grad());
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_a_fixed_point() {
        let mut s = store_with("w", vec![1.5, -2.0]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() });
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        opt.step(&mut s, &grads).unwrap();
        assert_eq!(s.get("w").unwrap().data, vec![1.5, -2.0]);
    }

    #[test]
    fn descends_on_quadratic() {
        // f(w) = w^2 at w=1, grad 2
        let mut s = store_with("w", vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() });
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![2.0]);
        opt.step(&mut s, &grads).unwrap();
        assert!(s.get("w").unwrap().data[0] < 1.0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = store_with("w", vec![1.0]);
        s.freeze_prefix("w");
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![5.0]);
        opt.step(&mut s, &grads).unwrap();
        assert_eq!(s.get("w").unwrap().data, vec![1.0]);
    }

    #[test]
    fn empty_grads_is_an_error() {
        let mut s = store_with("w", vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt.step(&mut s, &BTreeMap::new()).is_err());
    }

    #[test]
    fn matches_reference_update_sequence() {
        // independent recomputation of the update rule, scripted for 3 steps
        let mut s = store_with("w", vec![0.7]);
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(cfg.clone());
        let gs = [0.3, -0.8, 0.12];

        let (mut w, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for (i, &g) in gs.iter().enumerate() {
            let t = (i + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mhat = m / (1.0 - cfg.beta1.powi(t));
            let vhat = v / (1.0 - cfg.beta2.powi(t));
            w -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * w);

            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), vec![g]);
            opt.step(&mut s, &grads).unwrap();
        }
        let got = s.get("w").unwrap().data[0];
        assert!((got - w).abs() < 1e-12, "{got} vs {w}");
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = AdamWConfig { lr: 1.0, warmup_steps: 4, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 0.25);
        assert_eq!(cfg.lr_at(1), 0.5);
        assert_eq!(cfg.lr_at(3), 1.0);
        assert_eq!(cfg.lr_at(100), 1.0);
    }
}
