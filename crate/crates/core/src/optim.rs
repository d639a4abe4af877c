//! Adam with global gradient-norm clipping and exportable moment state.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: Some(1.0) }
    }
}

impl OptimizerConfig {
    pub fn with_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

pub struct Adam {
    cfg: OptimizerConfig,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: OptimizerConfig) -> Result<Self> {
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { cfg, params, m, v, step: 0 })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Apply one update from `grads`. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let gs: Vec<Option<Tensor>> = self.params.iter().map(|(_, p)| grads.get(p.as_tensor()).cloned()).collect();
        let mut sq = 0.0;
        for g in gs.iter().flatten() {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Validation("non-finite gradient norm".into()));
        }
        let clip = match self.cfg.grad_clip {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, g) in gs.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let g = (g.detach() * clip)?;
            self.m[i] = ((&self.m[i] * b1)? + (&g * (1.0 - b1))?)?;
            self.v[i] = ((&self.v[i] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&self.m[i] / bc1)?;
            let v_hat = (&self.v[i] / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let p = &self.params[i].1;
            p.set(&(p.as_tensor() - (update * self.cfg.learning_rate)?)?)?;
        }
        Ok(norm)
    }

    /// Moment tensors keyed `optim.<param>.m` / `optim.<param>.v`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("optim.{name}.m"), self.m[i].clone());
            out.insert(format!("optim.{name}.v"), self.v[i].clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, _)) in self.params.iter().enumerate() {
            for (suffix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("optim.{name}.{suffix}");
                let t = tensors.get(&key).ok_or_else(|| Error::Validation(format!("checkpoint lacks {key}")))?;
                *slot = t.to_dtype(slot.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn minimises_quadratic() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], OptimizerConfig { grad_clip: None, ..OptimizerConfig::with_rate(0.1) }).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn zero_rate_leaves_parameters_bitwise() {
        let x = Var::from_tensor(&Tensor::new(&[0.3f32, 1.7], &Device::Cpu).unwrap()).unwrap();
        let before: Vec<f32> = x.as_tensor().to_vec1().unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], OptimizerConfig::with_rate(0.0)).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let after: Vec<f32> = x.as_tensor().to_vec1().unwrap();
        assert_eq!(before, after);
        assert_eq!(opt.state().len(), 2);
    }

    #[test]
    fn clipping_bounds_first_step() {
        let x = Var::from_tensor(&Tensor::new(&[100.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], OptimizerConfig::with_rate(1.0)).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let norm = opt.step(&loss.backward().unwrap()).unwrap();
        assert!((norm - 200.0).abs() < 1e-9);
    }
}
