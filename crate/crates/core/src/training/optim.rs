use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::config::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// `lr0 · ½ (1 + cos(π · step / total_steps))`; `step` is clamped to
/// `[0, total_steps]`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let s = step.min(total_steps) as f64;
    lr0 * 0.5 * (1.0 + (PI * s / total_steps as f64).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl OptimConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        OptimConfig {
            kind: cfg.optimizer,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
        }
    }
}

/// Adam or SGD-with-momentum over a named parameter set. Weight decay is the
/// classic L2 term added to the gradient.
pub struct Optimizer {
    pub cfg: OptimConfig,
    /// Completed update count, used for Adam bias correction.
    pub t: u64,
    /// Adam: `[m, v]`; SGD: `[velocity]`.
    pub slots: BTreeMap<String, Vec<Tensor>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub updated: usize,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Self {
        Optimizer {
            cfg,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    /// One update of the `trainable` parameters. Parameters without a
    /// gradient are left untouched, as are their slots.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, trainable: &BTreeSet<String>, lr: f64) -> Result<UpdateStats> {
        let mut present = Vec::new();
        let mut sq = 0.0f64;
        for name in trainable {
            let var = store
                .var(name)
                .ok_or_else(|| Error::config(name.as_str(), "unknown trainable parameter"))?;
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                present.push((name, var, g.detach()));
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            let bad: Vec<&str> = present
                .iter()
                .filter(|(_, _, g)| !crate::nn::all_finite(g).unwrap_or(false))
                .map(|(n, _, _)| n.as_str())
                .collect();
            return Err(Error::numeric(None, format!("non-finite gradient in {bad:?}")));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if grad_norm > c => c / (grad_norm + 1e-6),
            _ => 1.0,
        };
        self.t += 1;
        let t = self.t as i32;
        for (name, var, g) in &present {
            let p = &var.as_tensor().detach();
            let mut g = (g * scale)?;
            if self.cfg.weight_decay > 0.0 {
                g = (g + (p * self.cfg.weight_decay)?)?;
            }
            let slots = self.slots.entry((*name).clone()).or_default();
            let update = match self.cfg.kind {
                OptimizerKind::Adam => {
                    if slots.is_empty() {
                        slots.push(p.zeros_like()?);
                        slots.push(p.zeros_like()?);
                    }
                    let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                    let m = ((&slots[0] * b1)? + (&g * (1.0 - b1))?)?;
                    let v = ((&slots[1] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
                    let m_hat = (&m / (1.0 - b1.powi(t)))?;
                    let v_hat = (&v / (1.0 - b2.powi(t)))?;
                    let u = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
                    slots[0] = m.detach();
                    slots[1] = v.detach();
                    u
                }
                OptimizerKind::Sgd => {
                    if slots.is_empty() {
                        slots.push(p.zeros_like()?);
                    }
                    let buf = ((&slots[0] * self.cfg.momentum)? + g)?;
                    slots[0] = buf.detach();
                    buf
                }
            };
            var.set(&(p - (update * lr)?)?)?;
        }
        Ok(UpdateStats {
            grad_norm,
            updated: present.len(),
        })
    }
}
