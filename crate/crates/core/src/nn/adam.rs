use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. First and second moments are kept per
/// parameter name so they can be checkpointed alongside the weights.
#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `params` that has a
    /// gradient in `grads`. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients keep their op history; drop it so the moments do not
            // hold every past graph alive
            let g = &g.detach();
            let m = match self.first.get(name) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&var.as_tensor().detach().sub(&(update * lr)?)?)?;
            self.first.insert(name.clone(), m.detach());
            self.second.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for (k, v) in &self.first {
            tensors.insert(format!("m/{k}"), v.clone());
        }
        for (k, v) in &self.second {
            tensors.insert(format!("v/{k}"), v.clone());
        }
        tensors.insert(
            "step".into(),
            Tensor::new(&[self.step as f64], &candle_core::Device::Cpu)?,
        );
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &candle_core::Device::Cpu)?;
        let step = tensors
            .get("step")
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing optimizer step", path.display())))?
            .to_vec1::<f64>()?;
        self.step = step.first().copied().unwrap_or(0.0) as u64;
        self.first.clear();
        self.second.clear();
        for (k, v) in tensors {
            if let Some(name) = k.strip_prefix("m/") {
                self.first.insert(name.to_string(), v);
            } else if let Some(name) = k.strip_prefix("v/") {
                self.second.insert(name.to_string(), v);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new(1);
        let conv = store.conv2d("c", 1, 1, 1, 1, 0, Init::Normal(0.5)).unwrap();
        let before: Vec<f32> = conv.weight.flatten_all().unwrap().to_vec1().unwrap();
        // loss = w  => grad = 1
        let loss = conv.weight.as_tensor().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig::new(0.1, 0.5));
        adam.step(&store, &grads).unwrap();
        let after: Vec<f32> = conv.weight.flatten_all().unwrap().to_vec1().unwrap();
        assert!((before[0] - after[0] - 0.1).abs() < 1e-6);
        // bias had no gradient and stays put
        let b: Vec<f32> = conv.bias.to_vec1().unwrap();
        assert_eq!(b, vec![0.0]);
    }

    #[test]
    fn state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("adam.safetensors");
        let mut store = ParamStore::new(1);
        let conv = store.conv2d("c", 1, 2, 3, 1, 1, Init::Normal(0.5)).unwrap();
        let grads = conv.weight.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let mut adam = Adam::new(AdamConfig::new(0.01, 0.9));
        adam.step(&store, &grads).unwrap();
        adam.save(&p).unwrap();
        let mut back = Adam::new(AdamConfig::new(0.01, 0.9));
        back.load(&p).unwrap();
        assert_eq!(back.step_count(), 1);
        let a: Vec<f32> = adam.first["c.weight"].flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = back.first["c.weight"].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }
}
