use crate::diffcore::{Gradients, Tensor, Var};
use crate::error::{Error, Result};

/// Anything that owns an ordered list of trainable tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Adds `g` into every parameter's gradient buffer.
    fn accumulate_grads(&mut self, g: &ParamGrads) -> Result<()> {
        let mut ps = self.params_mut();
        if ps.len() != g.blocks.len() {
            return Err(Error::dim("accumulate_grads", &[ps.len()], &[g.blocks.len()]));
        }
        for (p, b) in ps.iter_mut().zip(&g.blocks) {
            p.accumulate_grad(b)?;
        }
        Ok(())
    }

    /// Current gradient buffers (zeros where none was allocated).
    fn grads(&self) -> ParamGrads {
        ParamGrads {
            blocks: self
                .params()
                .iter()
                .map(|p| p.grad().map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
                .collect(),
        }
    }
}

/// Gradient blocks aligned with [`Parameterized::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub blocks: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        ParamGrads {
            blocks: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &ParamGrads, c: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (p, q) in a.iter_mut().zip(b) {
                *p += c * q;
            }
        }
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.blocks.iter_mut().flatten().for_each(|v| *v *= c);
        self
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|v| v.is_finite())
    }
}

/// Gathers per-parameter gradients from a backward pass; unreached leaves get zeros.
pub(crate) fn collect_grads(grads: &mut Gradients, vars: &[Var], params: &[&Tensor]) -> ParamGrads {
    ParamGrads {
        blocks: vars
            .iter()
            .zip(params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect(),
    }
}
