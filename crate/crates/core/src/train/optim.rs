use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::{Block, Container, ParamGrads};

/// Step size `base_rate` for the first `hold_iters` iterations, then
/// `base_rate · hold_iters / t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaSchedule {
    pub base_rate: f64,
    pub hold_iters: usize,
}

impl SaSchedule {
    pub fn new(base_rate: f64, hold_iters: usize) -> Self {
        SaSchedule { base_rate, hold_iters }
    }

    /// Rate at 1-based iteration `t`.
    pub fn rate(&self, t: usize) -> f64 {
        let hold = self.hold_iters.max(1);
        if t <= hold {
            self.base_rate
        } else {
            self.base_rate * hold as f64 / t as f64
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        if self.base_rate >= 0.0 && self.base_rate.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("{key}.base_rate must be >= 0, got {}", self.base_rate)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

/// Adam (β₁ 0.9, β₂ 0.999) or RMSProp (decay 0.9), both with ε = 1e-8, used
/// to ascend an objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub decay: f64,
    pub eps: f64,
    pub steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            decay: 0.9,
            eps: 1e-8,
            steps: 0,
            first: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
            second: zeros(),
        }
    }

    /// Moves every parameter along the preconditioned `grad` by `rate`.
    /// Accumulators always advance; with `rate == 0` parameters are untouched.
    pub fn ascend(&mut self, params: Vec<&mut Tensor>, grad: &ParamGrads, rate: f64) -> Result<()> {
        if params.len() != self.second.len() || grad.blocks.len() != params.len() {
            return Err(Error::dim(
                "optimizer step",
                &[params.len(), grad.blocks.len()],
                &[self.second.len(), self.second.len()],
            ));
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (k, (p, g)) in params.into_iter().zip(&grad.blocks).enumerate() {
            if p.numel() != g.len() || self.second[k].len() != g.len() {
                return Err(Error::dim("optimizer step", p.shape(), &[g.len()]));
            }
            let s = &mut self.second[k];
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let m = &mut self.first[k];
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for i in 0..g.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        s[i] = self.beta2 * s[i] + (1.0 - self.beta2) * g[i] * g[i];
                        if rate != 0.0 {
                            data[i] += rate * (m[i] / c1) / ((s[i] / c2).sqrt() + self.eps);
                        }
                    }
                }
                OptimizerKind::RmsProp => {
                    for i in 0..g.len() {
                        s[i] = self.decay * s[i] + (1.0 - self.decay) * g[i] * g[i];
                        if rate != 0.0 {
                            data[i] += rate * g[i] / (s[i].sqrt() + self.eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let block = |prefix: &str, k: usize, v: &Vec<f64>| Block {
            name: format!("{prefix}.{k}"),
            shape: vec![v.len()],
            data: v.clone(),
        };
        let mut blocks: Vec<Block> = self.first.iter().enumerate().map(|(k, v)| block("first", k, v)).collect();
        blocks.extend(self.second.iter().enumerate().map(|(k, v)| block("second", k, v)));
        Container {
            kind: "optimizer".into(),
            meta: json!({
                "kind": self.kind,
                "beta1": self.beta1,
                "beta2": self.beta2,
                "decay": self.decay,
                "eps": self.eps,
                "steps": self.steps,
                "params": self.second.len(),
            }),
            blocks,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "optimizer" {
            return Err(Error::Data(format!("expected an optimizer checkpoint, found {}", c.kind)));
        }
        #[derive(Deserialize)]
        struct Meta {
            kind: OptimizerKind,
            beta1: f64,
            beta2: f64,
            decay: f64,
            eps: f64,
            steps: u64,
            params: usize,
        }
        let meta: Meta = serde_json::from_value(c.meta.clone())?;
        let expected = meta.params * if meta.kind == OptimizerKind::Adam { 2 } else { 1 };
        if c.blocks.len() != expected {
            return Err(Error::Data(format!(
                "optimizer checkpoint has {} blocks, expected {expected}",
                c.blocks.len()
            )));
        }
        let mut data: Vec<Vec<f64>> = c.blocks.iter().map(|b| b.data.clone()).collect();
        let second = data.split_off(expected - meta.params);
        Ok(Optimizer {
            kind: meta.kind,
            beta1: meta.beta1,
            beta2: meta.beta2,
            decay: meta.decay,
            eps: meta.eps,
            steps: meta.steps,
            first: data,
            second,
        })
    }
}
