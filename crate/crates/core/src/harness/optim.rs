//! Adaptive-moment optimizer with decoupled weight decay.

use crate::error::{Result, StetError};
use crate::model::ParameterStore;
use crate::tensor::{NamedTensor, Tensor};

use super::config::OptimizerConfig;

/// Label recorded in every report header.
pub const OPTIMIZER_NAME: &str = "adamw (decoupled weight decay; stands in for RAdam)";

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ParameterStore) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. `grads[i]` belongs to parameter `i`; parameters without a
    /// gradient are left untouched (including weight decay).
    pub fn step(&mut self, params: &mut ParameterStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(StetError::dim("optimizer", &[params.len()], &[grads.len()]));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                    return Err(StetError::NumericInstability {
                        path: format!("gradient of {}[{k}]", params.by_id(i).name),
                    });
                }
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (i, p) in params.as_mut_slice().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                *w *= decay;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            if let Some(k) = p.tensor.data().iter().position(|v| !v.is_finite()) {
                return Err(StetError::NumericInstability {
                    path: format!("{}[{k}] after step {}", p.name, self.step),
                });
            }
        }
        Ok(())
    }

    /// Moments as named tensors (`opt.m.<param>`, `opt.v.<param>`) plus the
    /// step counter, for checkpointing.
    pub fn state_tensors(&self, params: &ParameterStore) -> Vec<NamedTensor> {
        let mut out = Vec::with_capacity(2 * params.len() + 1);
        for (i, p) in params.iter().enumerate() {
            for (kind, buf) in [("m", &self.m[i]), ("v", &self.v[i])] {
                out.push(NamedTensor {
                    name: format!("opt.{kind}.{}", p.name),
                    tensor: Tensor::new(p.tensor.shape().to_vec(), buf.clone()).expect("same shape"),
                });
            }
        }
        out.push(NamedTensor {
            name: "opt.step".into(),
            tensor: Tensor::scalar(self.step as f64),
        });
        out
    }

    /// Restores moments written by [`AdamW::state_tensors`].
    pub fn restore(
        cfg: OptimizerConfig,
        params: &ParameterStore,
        tensors: &[NamedTensor],
    ) -> Result<Self> {
        let mut opt = Self::new(cfg, params);
        let find = |name: &str| tensors.iter().find(|t| t.name == name).map(|t| &t.tensor);
        let step = find("opt.step").ok_or_else(|| StetError::Config("checkpoint has no optimizer state".into()))?;
        opt.step = step.data()[0] as u64;
        for (i, p) in params.iter().enumerate() {
            for (kind, buf) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let t = find(&format!("opt.{kind}.{}", p.name))
                    .ok_or_else(|| StetError::Config(format!("missing optimizer moment for {}", p.name)))?;
                if t.numel() != buf.len() {
                    return Err(StetError::dim("optimizer restore", t.shape(), p.tensor.shape()));
                }
                buf.copy_from_slice(t.data());
            }
        }
        Ok(opt)
    }
}
