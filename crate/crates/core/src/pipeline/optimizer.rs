//! Adam with linear warmup, global-norm clipping, dev-driven decay and freezing.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup: u64,
    pub decay: f64,
    /// Minimum relative dev-loss improvement that avoids a decay.
    pub min_improvement: f64,
    /// The learning rate never drops below `lr / floor_div`.
    pub floor_div: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 8e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 5.0,
            warmup: 0,
            decay: 0.7,
            min_improvement: 0.002,
            floor_div: 50.0,
        }
    }
}

/// Outcome of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub lr: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Current base rate after dev-driven decays (before warmup scaling).
    pub lr: f64,
    pub t: u64,
    pub best_dev: Option<f64>,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    frozen: Vec<String>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            lr: config.lr,
            config,
            t: 0,
            best_dev: None,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Rebuilds an optimizer from saved fields.
    pub fn restore(
        config: AdamConfig,
        lr: f64,
        t: u64,
        best_dev: Option<f64>,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
        frozen: Vec<String>,
    ) -> Self {
        Adam {
            config,
            lr,
            t,
            best_dev,
            m,
            v,
            frozen,
        }
    }

    /// Learning rate applied at update number `t` (1-based).
    pub fn effective_lr(&self, t: u64) -> f64 {
        if self.config.warmup == 0 {
            return self.lr;
        }
        self.lr * (t as f64 / self.config.warmup as f64).min(1.0)
    }

    pub fn frozen(&self) -> &[String] {
        &self.frozen
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Stops updates to every parameter whose name starts with one of `prefixes`.
    pub fn freeze(&mut self, store: &ParamStore, prefixes: &[&str]) -> Result<()> {
        for p in prefixes {
            if store.matching(p).is_empty() {
                return Err(Error::contract(format!("freeze prefix {p:?} matches no parameter")));
            }
        }
        for p in prefixes {
            if !self.frozen.iter().any(|f| f == p) {
                self.frozen.push(p.to_string());
            }
        }
        Ok(())
    }

    pub fn unfreeze(&mut self, prefix: &str) -> Result<()> {
        let before = self.frozen.len();
        self.frozen.retain(|p| p != prefix);
        if self.frozen.len() == before {
            return Err(Error::contract(format!("prefix {prefix:?} is not frozen")));
        }
        Ok(())
    }

    fn updatable<'a>(&'a self, store: &'a ParamStore) -> impl Iterator<Item = &'a crate::numerics::Parameter> + 'a {
        store.iter().filter(move |p| p.trainable && !self.is_frozen(&p.name))
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<StepInfo> {
        let mut sq = 0.0;
        for p in self.updatable(store) {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
            sq += p.grad.sq_norm();
        }
        let norm = sq.sqrt();
        let clipped = norm > self.config.clip;
        let factor = if clipped { self.config.clip / norm } else { 1.0 };
        self.t += 1;
        let lr = self.effective_lr(self.t);
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let names: Vec<String> = self.updatable(store).map(|p| p.name.clone()).collect();
        for name in names {
            let p = store.get_mut(&name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self
                .v
                .entry(name)
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            if m.shape() != p.value.shape() {
                return Err(Error::shape(format!("moment shape mismatch for {}", p.name)));
            }
            let value = Arc::make_mut(&mut p.value);
            for (((x, g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g * factor;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *x -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(StepInfo {
            grad_norm: norm,
            lr,
            clipped,
        })
    }

    /// Dev-loss driven decay. Returns true when the rate was decayed.
    pub fn lr_schedule_update(&mut self, dev_loss: f64) -> bool {
        match self.best_dev {
            Some(best) if dev_loss > best * (1.0 - self.config.min_improvement) => {
                let floor = self.config.lr / self.config.floor_div;
                self.lr = (self.lr * self.config.decay).max(floor);
                true
            }
            _ => {
                self.best_dev = Some(dev_loss);
                false
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("enc.w", Tensor::vector(vec![1.0, -2.0, 3.0]), true).unwrap();
        s.insert("dec.w", Tensor::vector(vec![0.5, 0.5]), true).unwrap();
        s.insert("enc.bn.running_mean", Tensor::vector(vec![0.0]), false).unwrap();
        s
    }

    fn set_grads(s: &mut ParamStore, g: f64) {
        for p in s.iter_mut() {
            p.grad = p.grad.map(|_| g);
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut s = store();
        let before = s.clone();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        for (a, b) in s.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn warmup_is_linear() {
        let adam = Adam::new(AdamConfig {
            warmup: 100,
            ..Default::default()
        });
        assert_eq!(adam.effective_lr(50), 8e-4 / 2.0);
        assert_eq!(adam.effective_lr(100), 8e-4);
        assert_eq!(adam.effective_lr(1000), 8e-4);
    }

    #[test]
    fn clipping_scales_to_ceiling() {
        // first-step Adam moves each coordinate by lr·sign(g), so inspect the moments instead
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![0.0; 4]), true).unwrap();
        s.get_mut("w").unwrap().grad = Tensor::vector(vec![5.0, 5.0, 5.0, 5.0]);
        let mut adam = Adam::new(AdamConfig {
            clip: 1.0,
            ..Default::default()
        });
        let info = adam.step(&mut s).unwrap();
        assert!(info.clipped && (info.grad_norm - 10.0).abs() < 1e-12);
        let applied = adam.m["w"].map(|m| m / (1.0 - 0.9));
        assert!((applied.sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut s = store();
        s.get_mut("dec.w").unwrap().grad = Tensor::vector(vec![f64::NAN, 0.0]);
        let before = s.clone();
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut s), Err(Error::NonFinite(_))));
        assert_eq!(adam.t, 0);
        assert_eq!(s.value("enc.w").unwrap(), before.value("enc.w").unwrap());
    }

    #[test]
    fn frozen_params_and_buffers_stay_bit_identical() {
        let mut s = store();
        let mut adam = Adam::new(AdamConfig::default());
        adam.freeze(&s, &["enc."]).unwrap();
        let enc = s.value("enc.w").unwrap().clone();
        let dec = s.value("dec.w").unwrap().clone();
        for _ in 0..100 {
            set_grads(&mut s, 0.3);
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.value("enc.w").unwrap(), &enc);
        assert_ne!(s.value("dec.w").unwrap(), &dec);
        assert!(!adam.m.contains_key("enc.w"));
        assert_eq!(s.value("enc.bn.running_mean").unwrap().data(), &[0.0]);
        adam.unfreeze("enc.").unwrap();
        set_grads(&mut s, 0.3);
        adam.step(&mut s).unwrap();
        assert_ne!(s.value("enc.w").unwrap(), &enc);
        assert!(adam.freeze(&s, &["nothing."]).is_err());
        assert!(adam.unfreeze("enc.").is_err());
    }

    #[test]
    fn dev_schedule_decays_and_floors() {
        let mut adam = Adam::new(AdamConfig::default());
        for d in [10.0, 9.0, 8.0, 7.0] {
            assert!(!adam.lr_schedule_update(d));
        }
        assert_eq!(adam.lr, 8e-4);
        assert!(adam.lr_schedule_update(7.0));
        assert!((adam.lr - 8e-4 * 0.7).abs() < 1e-18);
        for _ in 0..50 {
            adam.lr_schedule_update(7.0);
        }
        assert_eq!(adam.lr, 8e-4 / 50.0);
    }
}
