//! AdamW with decoupled weight decay and per-group learning rates.
//!
//! Parameters that do not require gradients (a frozen backbone) or have no
//! gradient are skipped entirely, so neither the moment estimates nor the
//! decay touch them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Backbone learning rate relative to the head.
    pub backbone_lr_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, backbone_lr_factor: 0.1 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.backbone_lr_factor > 0.0) {
            return Err(Error::Config(format!("backbone_lr_factor must be positive, got {}", self.backbone_lr_factor)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("AdamW betas must be in [0, 1) and eps positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

struct Moments {
    m: Tensor,
    v: Tensor,
    step: i32,
}

pub struct AdamW {
    config: OptimizerConfig,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        AdamW { config, state: HashMap::new() }
    }

    /// One update over `(name, parameter, learning rate)` triples.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a Tensor, f64)>) {
        let c = &self.config;
        tch::no_grad(|| {
            for (name, p, lr) in params {
                let grad = p.grad();
                if !p.requires_grad() || !grad.defined() {
                    continue;
                }
                let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                    m: p.zeros_like(),
                    v: p.zeros_like(),
                    step: 0,
                });
                st.step += 1;
                let mut p = p.shallow_clone();
                if c.weight_decay > 0.0 {
                    let _ = p.g_mul_scalar_(1.0 - lr * c.weight_decay);
                }
                let _ = st.m.g_mul_scalar_(c.beta1);
                let _ = st.m.g_add_(&(&grad * (1.0 - c.beta1)));
                let _ = st.v.g_mul_scalar_(c.beta2);
                let _ = st.v.addcmul_(&(&grad * (1.0 - c.beta2)), &grad);
                let bias1 = 1.0 - c.beta1.powi(st.step);
                let bias2 = 1.0 - c.beta2.powi(st.step);
                let denom = (&st.v / bias2).sqrt() + c.eps;
                let update = (&st.m / bias1) / denom * lr;
                let _ = p.g_sub_(&update);
            }
        });
    }

    pub fn zero_grad<'a>(params: impl IntoIterator<Item = &'a Tensor>) {
        for p in params {
            let mut p = p.shallow_clone();
            p.zero_grad();
        }
    }
}
