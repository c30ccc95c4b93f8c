use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ModelParams, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters whose name starts with `prefix` use learning rate `lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub prefix: String,
    pub lr: f64,
}

/// Adam with per-group learning rates and lazily allocated moments.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub default_lr: f64,
    pub groups: Vec<ParamGroup>,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, default_lr: f64, groups: Vec<ParamGroup>) -> Self {
        Self {
            config,
            default_lr,
            groups,
            moments: BTreeMap::new(),
            t: 0,
        }
    }

    pub(crate) fn from_moments(t: u64, moments: BTreeMap<String, (Vec<T>, Vec<T>)>) -> Self {
        Self {
            config: AdamConfig::default(),
            default_lr: 0.0,
            groups: vec![],
            moments,
            t,
        }
    }

    /// Keep restored moments, replace the hyperparameters.
    pub fn with_hyperparams(mut self, config: AdamConfig, default_lr: f64, groups: Vec<ParamGroup>) -> Self {
        self.config = config;
        self.default_lr = default_lr;
        self.groups = groups;
        self
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.groups
            .iter()
            .find(|g| name.starts_with(&g.prefix))
            .map(|g| g.lr)
            .unwrap_or(self.default_lr)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, &(Vec<T>, Vec<T>))> {
        self.moments.iter()
    }

    /// One update of every parameter that holds a gradient. Parameters that
    /// received no gradient are left untouched, moments included.
    pub fn step(&mut self, params: &mut ModelParams<T>) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut updates = Vec::new();
        for (name, p) in params.iter() {
            let Some(g) = p.grad() else { continue };
            if g.len() != p.numel() {
                return Err(Error::shape("adam", name.clone(), "gradient length differs from parameter"));
            }
            let lr = self.lr_for(name);
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            if m.len() != g.len() {
                return Err(Error::shape("adam", name.clone(), "moment length differs from parameter"));
            }
            let mut data = p.to_vec();
            for i in 0..data.len() {
                let gi = g[i].as_f64();
                let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * gi * gi;
                m[i] = T::from_real(mi);
                v[i] = T::from_real(vi);
                let upd = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                data[i] = T::from_real(data[i].as_f64() - upd);
            }
            updates.push((name.clone(), data));
        }
        for (name, data) in updates {
            params.set_data(&name, data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ModelParams::<f64>::new(0, "");
        p.insert("w", Tensor::parameter(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        p.get("w").unwrap().scale(0.0).sum().backward().unwrap();
        let mut adam = Adam::new(AdamConfig::default(), 0.1, vec![]);
        adam.step(&mut p).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr * g / (|g| + eps) ≈ lr.
        let mut p = ModelParams::<f64>::new(0, "");
        p.insert("w", Tensor::parameter(&[1], vec![0.0]).unwrap()).unwrap();
        p.get("w").unwrap().sum().backward().unwrap();
        let mut adam = Adam::new(AdamConfig::default(), 0.1, vec![]);
        adam.step(&mut p).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn groups_get_distinct_rates() {
        let mut p = ModelParams::<f64>::new(0, "");
        p.insert("unet.w", Tensor::parameter(&[1], vec![0.0]).unwrap()).unwrap();
        p.insert("decoder.w", Tensor::parameter(&[1], vec![0.0]).unwrap()).unwrap();
        let loss = p.get("unet.w").unwrap().add(p.get("decoder.w").unwrap()).unwrap().sum();
        loss.backward().unwrap();
        let mut adam = Adam::new(
            AdamConfig::default(),
            5e-5,
            vec![ParamGroup {
                prefix: "unet.".into(),
                lr: 1e-4,
            }],
        );
        adam.step(&mut p).unwrap();
        let a = p.get("unet.w").unwrap().item();
        let b = p.get("decoder.w").unwrap().item();
        assert!((a + 1e-4).abs() < 1e-10);
        assert!((b + 5e-5).abs() < 1e-10);
    }

    #[test]
    fn untouched_parameters_get_no_moments() {
        let mut p = ModelParams::<f64>::new(0, "");
        p.insert("a", Tensor::parameter(&[1], vec![1.0]).unwrap()).unwrap();
        p.insert("b", Tensor::parameter(&[1], vec![2.0]).unwrap()).unwrap();
        p.get("a").unwrap().sum().backward().unwrap();
        let mut adam = Adam::new(AdamConfig::default(), 0.1, vec![]);
        adam.step(&mut p).unwrap();
        assert_eq!(adam.moments().count(), 1);
        assert_eq!(p.get("b").unwrap().item(), 2.0);
    }
}
