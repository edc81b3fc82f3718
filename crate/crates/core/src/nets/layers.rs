use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};

/// Nonlinearity applied after a layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu { slope: f64 },
    Softplus,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub const LEAKY_RELU: Activation = Activation::LeakyRelu { slope: 0.2 };

    fn apply(self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let kind = match self {
            Activation::Identity => return Ok(x),
            Activation::LeakyRelu { slope } => Unary::LeakyRelu(slope),
            Activation::Softplus => Unary::Softplus,
            Activation::Sigmoid => Unary::Sigmoid,
            Activation::Tanh => Unary::Tanh,
        };
        tape.unary(kind, x)
    }
}

/// Whether batch normalization uses minibatch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Inference,
}

/// Fully connected layer, optionally weight-normalized.
///
/// With weight normalization the effective row `i` is
/// `gain[i] * weight[i] / ‖weight[i]‖₂`; otherwise `weight` is used as is.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub gain: Option<Tensor>,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        weight_norm: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, 0.05).expect("valid std");
        let w: Vec<f64> = (0..input * output).map(|_| normal.sample(rng)).collect();
        DenseLayer {
            weight: Tensor::new([output, input], w).unwrap().with_grad(),
            gain: weight_norm.then(|| Tensor::filled([output], 1.0).with_grad()),
            bias: Tensor::zeros([output]).with_grad(),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Weight matrix actually applied to inputs.
    pub fn effective_weight(&self) -> Vec<f64> {
        let (out, inp) = (self.output_dim(), self.input_dim());
        let mut w = self.weight.data().to_vec();
        if let Some(g) = &self.gain {
            for i in 0..out {
                let row = &mut w[i * inp..(i + 1) * inp];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v *= g.data()[i] / norm);
            }
        }
        w
    }
}

/// Batch normalization with learned affine and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight kept on the old running value at each update.
    pub momentum: f64,
    pub eps: f64,
    pub activation: Activation,
}

impl BatchNormLayer {
    pub fn new(dim: usize, activation: Activation) -> Self {
        BatchNormLayer {
            gamma: Tensor::filled([dim], 1.0).with_grad(),
            beta: Tensor::zeros([dim]).with_grad(),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.9,
            eps: 1e-5,
            activation,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    /// Folds one minibatch's statistics into the running averages.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let n = stats.count as f64;
        // unbiased variance for the running estimate
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for j in 0..self.dim() {
            self.running_mean[j] = m * self.running_mean[j] + (1.0 - m) * stats.mean[j];
            self.running_var[j] = m * self.running_var[j] + (1.0 - m) * stats.var[j] * correction;
        }
    }
}

/// Minibatch statistics observed by a batch-norm layer in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    BatchNorm(BatchNormLayer),
}

/// Serialized description of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        weight_norm: bool,
        activation: Activation,
    },
    BatchNorm {
        dim: usize,
        momentum: f64,
        eps: f64,
        activation: Activation,
    },
}

/// Result of a forward pass recorded on a tape.
pub struct Forward {
    pub out: Var,
    /// One var per parameter tensor, in [`Mlp::params`] order.
    pub params: Vec<Var>,
    /// One entry per batch-norm layer when run in train mode.
    pub bn_stats: Vec<BatchStats>,
}

/// Sequential stack of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Dense(d) => Some(d.input_dim()),
            Layer::BatchNorm(_) => None,
        })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| match l {
            Layer::Dense(d) => d.output_dim(),
            Layer::BatchNorm(b) => b.dim(),
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => LayerSpec::Dense {
                    input: d.input_dim(),
                    output: d.output_dim(),
                    weight_norm: d.gain.is_some(),
                    activation: d.activation,
                },
                Layer::BatchNorm(b) => LayerSpec::BatchNorm {
                    dim: b.dim(),
                    momentum: b.momentum,
                    eps: b.eps,
                    activation: b.activation,
                },
            })
            .collect()
    }

    /// Trainable tensors: per dense layer weight, gain (if any), bias; per batch norm gamma, beta.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense(d) => {
                    out.push(&d.weight);
                    if let Some(g) = &d.gain {
                        out.push(g);
                    }
                    out.push(&d.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&b.gamma);
                    out.push(&b.beta);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    if let Some(g) = &mut d.gain {
                        out.push(g);
                    }
                    out.push(&mut d.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
            }
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b),
            Layer::Dense(_) => None,
        })
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (bn, s) in self.batch_norms_mut().zip(stats) {
            bn.update_running(s);
        }
    }

    /// Records the forward pass. With `track` false the parameters enter the
    /// tape as constants, so only gradients with respect to inputs are formed.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        mode: NormMode,
        track: bool,
    ) -> Result<Forward> {
        let bind = |tape: &mut Tape<'a>, t: &'a Tensor| {
            if track {
                tape.leaf(t)
            } else {
                tape.constant_ref(t)
            }
        };
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        let mut h = x;
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    let w = bind(tape, &d.weight);
                    params.push(w);
                    let mut z = tape.matmul_nt(h, w)?;
                    if let Some(g) = &d.gain {
                        let gv = bind(tape, g);
                        params.push(gv);
                        let norm = tape.row_norm(w)?;
                        let s = tape.div(gv, norm)?;
                        z = tape.mul_row(z, s)?;
                    }
                    let b = bind(tape, &d.bias);
                    params.push(b);
                    z = tape.add_row(z, b)?;
                    h = d.activation.apply(tape, z)?;
                }
                Layer::BatchNorm(bn) => {
                    let normed = match mode {
                        NormMode::Train => {
                            let (v, mean, var) = tape.batch_norm(h, bn.eps)?;
                            let count = tape.shape(h)[0];
                            bn_stats.push(BatchStats { mean, var, count });
                            v
                        }
                        NormMode::Inference => {
                            let shift = tape.constant(
                                [bn.dim()],
                                bn.running_mean.iter().map(|m| -m).collect(),
                            )?;
                            let inv = tape.constant(
                                [bn.dim()],
                                bn.running_var
                                    .iter()
                                    .map(|v| 1.0 / (v + bn.eps).sqrt())
                                    .collect(),
                            )?;
                            let c = tape.add_row(h, shift)?;
                            tape.mul_row(c, inv)?
                        }
                    };
                    let gv = bind(tape, &bn.gamma);
                    let bv = bind(tape, &bn.beta);
                    params.push(gv);
                    params.push(bv);
                    let s = tape.mul_row(normed, gv)?;
                    let z = tape.add_row(s, bv)?;
                    h = bn.activation.apply(tape, z)?;
                }
            }
        }
        Ok(Forward {
            out: h,
            params,
            bn_stats,
        })
    }

    pub fn from_specs<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut width: Option<usize> = None;
        for s in specs {
            match *s {
                LayerSpec::Dense {
                    input,
                    output,
                    weight_norm,
                    activation,
                } => {
                    if let Some(w) = width {
                        if w != input {
                            return Err(Error::dim("layer stack", &[w], &[input]));
                        }
                    }
                    if input == 0 || output == 0 {
                        return Err(Error::Config("dense layer with zero width".into()));
                    }
                    layers.push(Layer::Dense(DenseLayer::new(
                        input,
                        output,
                        weight_norm,
                        activation,
                        rng,
                    )));
                    width = Some(output);
                }
                LayerSpec::BatchNorm {
                    dim,
                    momentum,
                    eps,
                    activation,
                } => {
                    if let Some(w) = width {
                        if w != dim {
                            return Err(Error::dim("layer stack", &[w], &[dim]));
                        }
                    }
                    if !(momentum > 0.0 && momentum < 1.0) || eps < 0.0 {
                        return Err(Error::Config(format!(
                            "batch norm momentum {momentum} must lie in (0,1) and eps {eps} must be >= 0"
                        )));
                    }
                    let mut bn = BatchNormLayer::new(dim, activation);
                    bn.momentum = momentum;
                    bn.eps = eps;
                    layers.push(Layer::BatchNorm(bn));
                    width = Some(dim);
                }
            }
        }
        Ok(Mlp { layers })
    }
}
