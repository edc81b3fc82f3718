use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::layers::{Activation, Forward, LayerSpec, Mlp, NormMode};
use super::params::{collect_grads, ParamGrads, Parameterized};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Random-field potential `u_θ(x, y)`: an MLP whose `K` outputs are the
/// per-class potentials.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel {
    pub net: Mlp,
}

impl EnergyModel {
    pub fn from_specs<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let net = Mlp::from_specs(specs, rng)?;
        if net.input_dim().is_none() {
            return Err(Error::Config("energy model needs at least one dense layer".into()));
        }
        Ok(EnergyModel { net })
    }

    /// Weight-normalized MLP `input - hidden... - classes` with the given hidden activation
    /// and a linear head.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut specs = Vec::new();
        let mut prev = input;
        for &h in hidden {
            specs.push(LayerSpec::Dense {
                input: prev,
                output: h,
                weight_norm: true,
                activation,
            });
            prev = h;
        }
        specs.push(LayerSpec::Dense {
            input: prev,
            output: classes,
            weight_norm: true,
            activation: Activation::Identity,
        });
        Self::from_specs(&specs, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim().unwrap_or(0)
    }

    pub fn classes(&self) -> usize {
        self.net.output_dim().unwrap_or(0)
    }

    /// Records `u_θ(x, ·)` (n x K) on `tape`.
    pub fn joint_on_tape<'a>(&'a self, tape: &mut Tape<'a>, x: Var, track: bool) -> Result<Forward> {
        self.net.forward(tape, x, NormMode::Inference, track)
    }

    /// Per-class potentials `u_θ(x, y)`.
    pub fn energy_joint(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant_ref(x);
        let f = self.joint_on_tape(&mut tape, xv, false)?;
        Ok(tape.to_tensor(f.out))
    }

    /// `u_θ(x) = log Σ_y exp u_θ(x, y)`.
    pub fn energy_marginal(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant_ref(x);
        let f = self.joint_on_tape(&mut tape, xv, false)?;
        let u = tape.logsumexp(f.out)?;
        Ok(tape.value(u).to_vec())
    }

    /// Softmax over classes of the joint potentials.
    pub fn class_posterior(&self, x: &Tensor) -> Result<Tensor> {
        let joint = self.energy_joint(x)?;
        Ok(softmax_rows(&joint))
    }

    /// Argmax class per row; ties go to the smallest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let joint = self.energy_joint(x)?;
        Ok((0..joint.rows()).map(|i| argmax(joint.row(i))).collect())
    }

    /// Gradient of `Σ_i u(x_i)` with respect to `x`, together with the per-row
    /// potentials. `u` is the marginal potential, or the class column when
    /// `class` is given.
    pub fn grad_x(&self, x: &Tensor, class: Option<usize>) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone().with_grad());
        let f = self.joint_on_tape(&mut tape, xv, false)?;
        let u = match class {
            None => tape.logsumexp(f.out)?,
            Some(c) => {
                let n = tape.shape(xv)[0];
                tape.pick(f.out, &vec![c; n])?
            }
        };
        let s = tape.sum(u)?;
        let mut grads = tape.backward(s)?;
        let g = grads
            .take(xv)
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        Ok((Tensor::new(x.shape().to_vec(), g)?, tape.value(u).to_vec()))
    }
}

impl Parameterized for EnergyModel {
    fn params(&self) -> Vec<&Tensor> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}

/// Directed generator `q_φ(x, h) = N(h; 0, I) · N(x; G(h), σ² I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub net: Mlp,
    pub sigma: f64,
}

impl Generator {
    pub fn from_specs<R: Rng + ?Sized>(specs: &[LayerSpec], sigma: f64, rng: &mut R) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("generator sigma must be positive, got {sigma}")));
        }
        let net = Mlp::from_specs(specs, rng)?;
        if net.input_dim().is_none() {
            return Err(Error::Config("generator needs at least one dense layer".into()));
        }
        Ok(Generator { net, sigma })
    }

    /// `latent - [dense, batch norm, activation]... - output` decoder.
    pub fn mlp<R: Rng + ?Sized>(
        latent: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        output_activation: Activation,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut specs = Vec::new();
        let mut prev = latent;
        for &h in hidden {
            specs.push(LayerSpec::Dense {
                input: prev,
                output: h,
                weight_norm: false,
                activation: Activation::Identity,
            });
            specs.push(LayerSpec::BatchNorm {
                dim: h,
                momentum: 0.9,
                eps: 1e-5,
                activation,
            });
            prev = h;
        }
        specs.push(LayerSpec::Dense {
            input: prev,
            output,
            weight_norm: false,
            activation: output_activation,
        });
        Self::from_specs(&specs, sigma, rng)
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_dim().unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim().unwrap_or(0)
    }

    fn check_sigma(&self) -> Result<()> {
        if self.sigma > 0.0 && self.sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "generator sigma must be positive, got {}",
                self.sigma
            )))
        }
    }

    pub fn decode_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        h: Var,
        mode: NormMode,
        track: bool,
    ) -> Result<Forward> {
        self.net.forward(tape, h, mode, track)
    }

    /// `G(h)`. In train mode batch statistics are used but running averages are left alone.
    pub fn decode(&self, h: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let hv = tape.constant_ref(h);
        let f = self.decode_on_tape(&mut tape, hv, mode, false)?;
        Ok(tape.to_tensor(f.out))
    }

    /// Ancestral sampling: `h ~ N(0, I)`, then `x' = G(h)` plus `σ ε` when `with_noise`.
    /// In train mode the batch-norm running statistics absorb this batch.
    pub fn generate<R: Rng + ?Sized>(
        &mut self,
        n: usize,
        rng: &mut R,
        with_noise: bool,
        mode: NormMode,
    ) -> Result<(Tensor, Tensor)> {
        if n == 0 {
            return Err(Error::Contract("generate needs n >= 1".into()));
        }
        let l = self.latent_dim();
        let h: Vec<f64> = (0..n * l).map(|_| rng.sample(StandardNormal)).collect();
        let h = Tensor::new([n, l], h)?;
        let (mut x, stats) = {
            let mut tape = Tape::new();
            let hv = tape.constant_ref(&h);
            let f = self.decode_on_tape(&mut tape, hv, mode, false)?;
            (tape.to_tensor(f.out), f.bn_stats)
        };
        if mode == NormMode::Train {
            self.net.update_running(&stats);
        }
        if with_noise {
            self.check_sigma()?;
            let s = self.sigma;
            for v in x.data_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v += s * e;
            }
        }
        Ok((h, x))
    }

    /// Records `log q_φ(x, h)` per row, normalizing constants included.
    pub fn log_q_joint_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        h: Var,
        mode: NormMode,
        track: bool,
    ) -> Result<(Var, Forward)> {
        self.check_sigma()?;
        let (n, l) = match tape.shape(h) {
            [n, l] => (*n, *l),
            s => return Err(Error::dim("log_q_joint", s, &[self.latent_dim()])),
        };
        if l != self.latent_dim() {
            return Err(Error::dim("log_q_joint", tape.shape(h), &[n, self.latent_dim()]));
        }
        if tape.shape(x) != [n, self.output_dim()] {
            return Err(Error::dim(
                "log_q_joint",
                tape.shape(x),
                &[n, self.output_dim()],
            ));
        }
        let d = self.output_dim() as f64;
        let f = self.decode_on_tape(tape, h, mode, track)?;
        let r = tape.sub(x, f.out)?;
        let r2 = tape.unary(crate::diffcore::Unary::Square, r)?;
        let rss = tape.row_sum(r2)?;
        let lik = tape.scale(rss, -0.5 / (self.sigma * self.sigma))?;
        let h2 = tape.unary(crate::diffcore::Unary::Square, h)?;
        let hss = tape.row_sum(h2)?;
        let prior = tape.scale(hss, -0.5)?;
        let s = tape.add(lik, prior)?;
        let constant = -0.5 * (l as f64) * (2.0 * PI).ln() - d * self.sigma.ln() - 0.5 * d * (2.0 * PI).ln();
        let out = tape.add_scalar(s, constant)?;
        Ok((out, f))
    }

    pub fn log_q_joint(&self, x: &Tensor, h: &Tensor, mode: NormMode) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (xv, hv) = (tape.constant_ref(x), tape.constant_ref(h));
        let (out, _) = self.log_q_joint_on_tape(&mut tape, xv, hv, mode, false)?;
        Ok(tape.value(out).to_vec())
    }

    /// Gradient of the batch mean of `log q_φ(x, h)` with respect to φ, plus that mean.
    pub fn mean_log_q_grad(&self, x: &Tensor, h: &Tensor, mode: NormMode) -> Result<(ParamGrads, f64)> {
        let mut tape = Tape::new();
        let (xv, hv) = (tape.constant_ref(x), tape.constant_ref(h));
        let (out, f) = self.log_q_joint_on_tape(&mut tape, xv, hv, mode, true)?;
        let m = tape.mean(out)?;
        let value = tape.scalar(m)?;
        let mut grads = tape.backward(m)?;
        Ok((collect_grads(&mut grads, &f.params, &self.params()), value))
    }
}

impl Parameterized for Generator {
    fn params(&self) -> Vec<&Tensor> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let k = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(k.max(1)) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}
