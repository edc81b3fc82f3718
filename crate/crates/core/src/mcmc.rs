//! Sample revision: finite-step Langevin (SGLD) and momentum (SGHMC) moves
//! that push generator proposals toward high-potential regions, and the
//! propose-then-revise sampler built on them.
//!
//! No accept/reject step is applied to the proposals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::{EnergyModel, Generator, NormMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Sgld,
    Sghmc,
}

/// Revision kernel settings. `delta = 0` gives noise-free revision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisionConfig {
    pub kernel: Kernel,
    /// Number of revision steps `M`.
    pub steps: usize,
    pub gamma: f64,
    pub beta: f64,
    pub eta: f64,
    pub delta: f64,
    /// Per-sample max norm of `∂u/∂x`.
    pub clip_norm: f64,
    /// Worker threads for row-parallel revision; results do not depend on it.
    pub threads: usize,
}

impl Default for RevisionConfig {
    fn default() -> Self {
        RevisionConfig {
            kernel: Kernel::Sgld,
            steps: 30,
            gamma: 0.01,
            beta: 0.9,
            eta: 0.01,
            delta: 0.0,
            clip_norm: 100.0,
            threads: 1,
        }
    }
}

impl RevisionConfig {
    pub fn sgld(steps: usize, gamma: f64, delta: f64) -> Self {
        RevisionConfig {
            kernel: Kernel::Sgld,
            steps,
            gamma,
            delta,
            ..Default::default()
        }
    }

    pub fn sghmc(steps: usize, beta: f64, eta: f64, delta: f64) -> Self {
        RevisionConfig {
            kernel: Kernel::Sghmc,
            steps,
            beta,
            eta,
            delta,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("revision.{what}")));
        match self.kernel {
            Kernel::Sgld if !(self.gamma > 0.0 && self.gamma.is_finite()) => {
                bad(&format!("gamma must be positive, got {}", self.gamma))
            }
            Kernel::Sghmc if !(self.eta > 0.0 && self.eta.is_finite()) => {
                bad(&format!("eta must be positive, got {}", self.eta))
            }
            Kernel::Sghmc if !(0.0..1.0).contains(&self.beta) => {
                bad(&format!("beta must lie in [0,1), got {}", self.beta))
            }
            _ if !(self.delta >= 0.0 && self.delta.is_finite()) => {
                bad(&format!("delta must be >= 0, got {}", self.delta))
            }
            _ if !(self.clip_norm > 0.0) => bad(&format!("clip_norm must be positive, got {}", self.clip_norm)),
            _ if self.threads == 0 => bad("threads must be >= 1"),
            _ => Ok(()),
        }
    }
}

/// Something with a differentiable potential `u(x)` (or `u(x, y)` per class).
pub trait Potential: Sync {
    fn input_dim(&self) -> usize;
    fn classes(&self) -> usize;
    /// `∂/∂x Σ_i u(x_i)` and the per-row potentials.
    fn grad_x(&self, x: &Tensor, class: Option<usize>) -> Result<(Tensor, Vec<f64>)>;
}

impl Potential for EnergyModel {
    fn input_dim(&self) -> usize {
        EnergyModel::input_dim(self)
    }

    fn classes(&self) -> usize {
        EnergyModel::classes(self)
    }

    fn grad_x(&self, x: &Tensor, class: Option<usize>) -> Result<(Tensor, Vec<f64>)> {
        EnergyModel::grad_x(self, x, class)
    }
}

/// Isotropic Gaussian log-density `u(x) = −‖x − μ‖² / (2 s²)`, up to a constant.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPotential {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianPotential {
    pub fn standard(dim: usize) -> Self {
        GaussianPotential {
            mean: vec![0.0; dim],
            std: 1.0,
        }
    }
}

impl Potential for GaussianPotential {
    fn input_dim(&self) -> usize {
        self.mean.len()
    }

    fn classes(&self) -> usize {
        1
    }

    fn grad_x(&self, x: &Tensor, _class: Option<usize>) -> Result<(Tensor, Vec<f64>)> {
        let d = self.mean.len();
        if x.shape().len() != 2 || x.cols() != d {
            return Err(Error::dim("gaussian potential", x.shape(), &[x.rows(), d]));
        }
        let prec = 1.0 / (self.std * self.std);
        let mut g = x.data().to_vec();
        let mut u = Vec::with_capacity(x.rows());
        for row in g.chunks_mut(d) {
            let mut s = 0.0;
            for (v, m) in row.iter_mut().zip(&self.mean) {
                let r = *v - m;
                s += r * r;
                *v = -r * prec;
            }
            u.push(-0.5 * s * prec);
        }
        Ok((Tensor::new(x.shape().to_vec(), g)?, u))
    }
}

/// Generator proposal `(h, x')` and its revision `x`, with the marginal
/// potential before and after.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSample {
    pub h: Tensor,
    pub x_prop: Tensor,
    pub x_rev: Tensor,
    pub energy_before: Vec<f64>,
    pub energy_after: Vec<f64>,
}

impl JointSample {
    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs `cfg.steps` SGLD updates `x ← x + γ ∂u/∂x + δ U`.
pub fn sgld_revise<P: Potential, R: Rng + ?Sized>(
    m: &P,
    x: &Tensor,
    cfg: &RevisionConfig,
    rng: &mut R,
    class: Option<usize>,
) -> Result<Tensor> {
    if cfg.kernel != Kernel::Sgld {
        return Err(Error::Contract("sgld_revise called with a non-SGLD config".into()));
    }
    revise(m, x, cfg, rng, class)
}

/// Runs `cfg.steps` SGHMC updates `v ← β v + η ∂u/∂x + δ U; x ← x + v` from `v = 0`.
pub fn sghmc_revise<P: Potential, R: Rng + ?Sized>(
    m: &P,
    x: &Tensor,
    cfg: &RevisionConfig,
    rng: &mut R,
    class: Option<usize>,
) -> Result<Tensor> {
    if cfg.kernel != Kernel::Sghmc {
        return Err(Error::Contract("sghmc_revise called with a non-SGHMC config".into()));
    }
    revise(m, x, cfg, rng, class)
}

/// Revises with whichever kernel `cfg` names.
///
/// One `u64` is drawn from `rng`; row `i` then uses its own ChaCha stream `i`
/// under that seed, so the result does not depend on `cfg.threads`.
pub fn revise<P: Potential, R: Rng + ?Sized>(
    m: &P,
    x: &Tensor,
    cfg: &RevisionConfig,
    rng: &mut R,
    class: Option<usize>,
) -> Result<Tensor> {
    cfg.validate()?;
    if x.shape().len() != 2 || x.cols() != m.input_dim() {
        return Err(Error::dim("revise", x.shape(), &[x.rows(), m.input_dim()]));
    }
    if let Some(c) = class {
        if c >= m.classes() {
            return Err(Error::Data(format!(
                "conditioning class {c} out of range for {} classes",
                m.classes()
            )));
        }
    }
    let seed: u64 = rng.random();
    let (n, d) = (x.rows(), x.cols());
    if n == 0 || cfg.steps == 0 {
        return Ok(x.clone());
    }
    let per = n.div_ceil(cfg.threads);
    let chunks: Vec<(usize, &[f64])> = x
        .data()
        .chunks(per * d)
        .enumerate()
        .map(|(i, c)| (i * per, c))
        .collect();
    let run = |(start, rows): &(usize, &[f64])| revise_rows(m, rows, *start, d, cfg, seed, class);
    let parts: Vec<Result<Vec<f64>>> = if cfg.threads == 1 {
        chunks.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| chunks.par_iter().map(run).collect())
    };
    let mut out = Vec::with_capacity(n * d);
    for p in parts {
        out.extend(p?);
    }
    Tensor::new([n, d], out)
}

fn revise_rows<P: Potential>(
    m: &P,
    rows: &[f64],
    first_row: usize,
    d: usize,
    cfg: &RevisionConfig,
    seed: u64,
    class: Option<usize>,
) -> Result<Vec<f64>> {
    let n = rows.len() / d;
    let mut streams: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream((first_row + i) as u64);
            r
        })
        .collect();
    let mut x = Tensor::new([n, d], rows.to_vec())?;
    let mut v = vec![0.0; n * d];
    for step in 0..cfg.steps {
        let (mut g, _) = m.grad_x(&x, class).map_err(|e| Error::Revision {
            step,
            detail: e.to_string(),
        })?;
        if !g.is_finite() {
            return Err(Error::Revision {
                step,
                detail: "non-finite potential gradient".into(),
            });
        }
        let clipped = clip_rows(g.data_mut(), d, cfg.clip_norm);
        if clipped > 0 {
            log::debug!("revision step {step}: clipped {clipped} of {n} gradients to norm {}", cfg.clip_norm);
        }
        let xs = x.data_mut();
        for (i, stream) in streams.iter_mut().enumerate() {
            for j in i * d..(i + 1) * d {
                let noise = if cfg.delta > 0.0 {
                    cfg.delta * stream.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                match cfg.kernel {
                    Kernel::Sgld => {
                        let step = cfg.gamma * g.data()[j] + noise;
                        xs[j] += step;
                    }
                    Kernel::Sghmc => {
                        v[j] = cfg.beta * v[j] + cfg.eta * g.data()[j] + noise;
                        xs[j] += v[j];
                    }
                }
            }
        }
        if !x.is_finite() {
            return Err(Error::Revision {
                step,
                detail: "revised sample is non-finite".into(),
            });
        }
    }
    Ok(x.into_data())
}

/// Rescales rows whose norm exceeds `max`; returns how many were rescaled.
fn clip_rows(g: &mut [f64], d: usize, max: f64) -> usize {
    let mut count = 0;
    for row in g.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > max {
            let s = max / norm;
            row.iter_mut().for_each(|v| *v *= s);
            count += 1;
        }
    }
    count
}

/// Draws `n` proposals from `g` and revises them under `m`.
///
/// In [`NormMode::Train`] the generator's batch-norm running statistics absorb
/// the proposal batch.
#[allow(clippy::too_many_arguments)]
pub fn propose_and_revise<R: Rng + ?Sized>(
    m: &EnergyModel,
    g: &mut Generator,
    n: usize,
    cfg: &RevisionConfig,
    rng: &mut R,
    with_noise: bool,
    mode: NormMode,
) -> Result<JointSample> {
    let (h, x_prop) = g.generate(n, rng, with_noise, mode)?;
    revise_proposal(m, h, x_prop, cfg, rng, None)
}

/// Revises an existing proposal batch and records the potentials before and after.
pub(crate) fn revise_proposal<R: Rng + ?Sized>(
    m: &EnergyModel,
    h: Tensor,
    x_prop: Tensor,
    cfg: &RevisionConfig,
    rng: &mut R,
    class: Option<usize>,
) -> Result<JointSample> {
    let x_rev = revise(m, &x_prop, cfg, rng, class)?;
    let potential = |x: &Tensor| -> Result<Vec<f64>> {
        match class {
            None => m.energy_marginal(x),
            Some(c) => {
                let j = m.energy_joint(x)?;
                Ok((0..j.rows()).map(|i| j.row(i)[c]).collect())
            }
        }
    };
    Ok(JointSample {
        energy_before: potential(&x_prop)?,
        energy_after: potential(&x_rev)?,
        h,
        x_prop,
        x_rev,
    })
}
