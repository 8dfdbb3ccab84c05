//! AdamW with decoupled weight decay and inspectable moment state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.04,
            grad_clip: Some(3.0),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            bail!(Config, "adam eps must be positive and weight decay non-negative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                bail!(Config, "grad_clip must be positive");
            }
        }
        Ok(())
    }
}

/// Per-parameter first/second moments and update counts, keyed by name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub counts: BTreeMap<String, u64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            counts: BTreeMap::new(),
        }
    }

    /// Updates every variable under one of `prefixes` that received a gradient.
    /// Parameters without a gradient are left untouched, weight decay included.
    /// Decay applies to matrices and higher-rank tensors only. Returns the
    /// pre-clip global gradient norm.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, prefixes: &[&str], lr: f64) -> Result<f64> {
        let c = self.config;
        let mut active = Vec::new();
        for (name, var) in store.vars() {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            if let Some(g) = grads.get(var.as_tensor()) {
                active.push((name, var, g.detach()));
            }
        }
        let mut sq = 0.0;
        for (_, _, g) in &active {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        let scale = match c.grad_clip {
            Some(max) if norm > max => max / (norm + 1e-6),
            _ => 1.0,
        };
        for (name, var, g) in active {
            let g = if scale != 1.0 { (g * scale)? } else { g };
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let k = self.counts.get(name).copied().unwrap_or(0) + 1;
            let bc1 = 1.0 - c.beta1.powi(k as i32);
            let bc2 = 1.0 - c.beta2.powi(k as i32);
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let p = var.as_tensor();
            let decayed = if p.rank() >= 2 && c.weight_decay > 0.0 {
                (p * (1.0 - lr * c.weight_decay))?
            } else {
                p.clone()
            };
            var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
            self.counts.insert(name.clone(), k);
        }
        Ok(norm)
    }

    /// Moments as one flat tensor map (`m.<name>`, `v.<name>`).
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn from_tensors(config: AdamWConfig, tensors: BTreeMap<String, Tensor>, counts: BTreeMap<String, u64>) -> Result<Self> {
        let mut opt = Self::new(config);
        for (k, t) in tensors {
            if let Some(n) = k.strip_prefix("m.") {
                opt.m.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("v.") {
                opt.v.insert(n.to_string(), t);
            } else {
                bail!(Shape, "unexpected optimizer tensor {k}");
            }
        }
        if opt.m.len() != opt.v.len() || opt.m.keys().any(|k| !counts.contains_key(k)) {
            bail!(Shape, "optimizer state is inconsistent");
        }
        opt.counts = counts;
        Ok(opt)
    }
}
