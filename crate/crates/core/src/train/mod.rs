//! Stochastic-approximation training of the energy model and the generator.
//!
//! Each iteration draws data minibatches, proposes and revises one joint
//! sample per data row, then takes one ascent step for θ and one for φ.

mod objective;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSplit;
use crate::error::{Error, Result};
use crate::mcmc::{propose_and_revise, RevisionConfig};
use crate::nets::{Container, EnergyModel, Generator, NormMode, Parameterized};

pub use objective::{
    confident_loss, mean_log_z, phi_grad, self_norm_loss, ssl_theta_grad, unsup_theta_grad, PhiStep, SslWeights,
    ThetaStep,
};
pub use optim::{Optimizer, OptimizerKind, SaSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Unsup,
    Ssl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_unsup: usize,
    /// Supervised rows per iteration, drawn with replacement from the labeled pool.
    pub batch_sup: usize,
    pub theta_optimizer: OptimizerKind,
    pub phi_optimizer: OptimizerKind,
    pub theta_rate: SaSchedule,
    pub phi_rate: SaSchedule,
    pub weights: SslWeights,
    /// Kernel used during training; experiment configs keep it in their own section.
    #[serde(skip)]
    pub revision: RevisionConfig,
    /// Add the generator's observation noise to proposals.
    pub proposal_noise: bool,
    /// Write checkpoints every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_unsup: 100,
            batch_sup: 100,
            theta_optimizer: OptimizerKind::Adam,
            phi_optimizer: OptimizerKind::Adam,
            theta_rate: SaSchedule::new(3e-4, 10_000),
            phi_rate: SaSchedule::new(3e-4, 10_000),
            weights: SslWeights::default(),
            revision: RevisionConfig::default(),
            proposal_noise: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, mode: TrainMode) -> Result<()> {
        if self.batch_unsup == 0 {
            return Err(Error::Config("train.batch_unsup must be >= 1".into()));
        }
        if mode == TrainMode::Ssl && self.batch_sup == 0 {
            return Err(Error::Config("train.batch_sup must be >= 1 in ssl mode".into()));
        }
        self.theta_rate.validate("train.theta_rate")?;
        self.phi_rate.validate("train.phi_rate")?;
        self.weights.validate()?;
        self.revision.validate()
    }
}

/// Independent random streams used by the loop.
pub struct TrainRngs {
    pub batch: ChaCha8Rng,
    pub proposal: ChaCha8Rng,
    pub revision: ChaCha8Rng,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub u_data_mean: f64,
    pub u_model_mean: f64,
    pub sup_ce: f64,
    pub r_c: f64,
    pub r_s: f64,
    pub phi_mse: f64,
}

impl LogRow {
    fn is_finite(&self) -> bool {
        [self.u_data_mean, self.u_model_mean, self.sup_ce, self.r_c, self.r_s, self.phi_mse]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub const LOG_FILE: &str = "train_log.csv";
pub const ENERGY_FILE: &str = "energy.ckpt";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const THETA_OPT_FILE: &str = "theta_optimizer.ckpt";
pub const PHI_OPT_FILE: &str = "phi_optimizer.ckpt";

/// Epoch-wise shuffled minibatches over a fixed index set.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Batcher {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

fn save_atomic(c: &Container, dir: &Path, name: &str) -> Result<()> {
    let tmp: PathBuf = dir.join(format!(".{name}.tmp"));
    c.save(&tmp)?;
    fs::rename(&tmp, dir.join(name))?;
    Ok(())
}

fn checkpoint(dir: &Path, e: &EnergyModel, g: &Generator, to: &Optimizer, po: &Optimizer) -> Result<()> {
    save_atomic(&e.to_container(), dir, ENERGY_FILE)?;
    save_atomic(&g.to_container(), dir, GENERATOR_FILE)?;
    save_atomic(&to.to_container(), dir, THETA_OPT_FILE)?;
    save_atomic(&po.to_container(), dir, PHI_OPT_FILE)
}

fn numeric(iter: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::Revision { .. } | Error::Domain { .. } => Error::Training {
            iter,
            detail: e.to_string(),
        },
        other => other,
    }
}

/// Runs `cfg.iterations` SA iterations, updating both models in place.
///
/// With `out` set, the log is streamed to `train_log.csv` and checkpoints are
/// written there; a failing iteration aborts without touching the last
/// checkpoint.
pub fn train(
    mode: TrainMode,
    energy: &mut EnergyModel,
    gen: &mut Generator,
    data: &LabeledSplit,
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
    out: Option<&Path>,
) -> Result<Vec<LogRow>> {
    cfg.validate(mode)?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.x.cols() != energy.input_dim() || gen.output_dim() != energy.input_dim() {
        return Err(Error::dim(
            "train",
            &[data.x.cols(), gen.output_dim()],
            &[energy.input_dim(), energy.input_dim()],
        ));
    }
    let labeled = match mode {
        TrainMode::Unsup => None,
        TrainMode::Ssl => {
            let (x, y) = data.labeled()?;
            if y.is_empty() {
                return Err(Error::Data("ssl training needs a labeled subset".into()));
            }
            if let Some(c) = y.iter().find(|&&c| c >= energy.classes()) {
                return Err(Error::Data(format!("label {c} out of range for {} classes", energy.classes())));
            }
            Some((x, y))
        }
    };
    let mut theta_opt = Optimizer::new(cfg.theta_optimizer, &energy.params());
    let mut phi_opt = Optimizer::new(cfg.phi_optimizer, &gen.params());
    let mut log_writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(csv::Writer::from_path(dir.join(LOG_FILE))?)
        }
        None => None,
    };
    let mut batcher = Batcher::new(data.len());
    let mut rows = Vec::with_capacity(cfg.iterations);
    for t in 1..=cfg.iterations {
        let err = numeric(t);
        let idx = batcher.next(cfg.batch_unsup, &mut rngs.batch);
        let x_u = data.x.select_rows(&idx);
        // U and S proposals are revised as one batch; rows keep independent noise streams.
        let n_sup = if labeled.is_some() { cfg.batch_sup } else { 0 };
        let joint = propose(energy, gen, cfg, rngs, cfg.batch_unsup + n_sup).map_err(&err)?;
        let theta = match &labeled {
            None => unsup_theta_grad(energy, &x_u, &joint.x_rev).map_err(&err)?,
            Some((lx, ly)) => {
                let sidx: Vec<usize> = (0..cfg.batch_sup).map(|_| rngs.batch.random_range(0..ly.len())).collect();
                let x_s = lx.select_rows(&sidx);
                let y_s: Vec<usize> = sidx.iter().map(|&i| ly[i]).collect();
                let rows: Vec<usize> = (0..joint.len()).collect();
                let (u_rows, s_rows) = rows.split_at(cfg.batch_unsup);
                let u_rev = joint.x_rev.select_rows(u_rows);
                let s_rev = joint.x_rev.select_rows(s_rows);
                ssl_theta_grad(energy, &x_u, &u_rev, &x_s, &y_s, &s_rev, &cfg.weights).map_err(&err)?
            }
        };
        let phi = phi_grad(gen, &joint, NormMode::Train).map_err(&err)?;
        let lr = cfg.theta_rate.rate(t);
        let row = LogRow {
            iter: t,
            lr,
            u_data_mean: theta.u_data_mean,
            u_model_mean: theta.u_model_mean,
            sup_ce: theta.sup_ce,
            r_c: theta.r_c,
            r_s: theta.r_s,
            phi_mse: phi.mse,
        };
        if !row.is_finite() || !theta.grad.is_finite() || !phi.grad.is_finite() {
            return Err(Error::Training {
                iter: t,
                detail: format!("non-finite loss or gradient: {row:?}"),
            });
        }
        theta_opt.ascend(energy.params_mut(), &theta.grad, lr)?;
        phi_opt.ascend(gen.params_mut(), &phi.grad, cfg.phi_rate.rate(t))?;
        if let Some(w) = &mut log_writer {
            w.serialize(&row)?;
        }
        if t % 500 == 0 || t == cfg.iterations {
            log::info!(
                "iter {t}: u_data {:.4} u_model {:.4} sup_ce {:.4} r_c {:.4} r_s {:.4} phi_mse {:.5}",
                row.u_data_mean,
                row.u_model_mean,
                row.sup_ce,
                row.r_c,
                row.r_s,
                row.phi_mse
            );
        }
        rows.push(row);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 {
                if let Some(w) = &mut log_writer {
                    w.flush()?;
                }
                checkpoint(dir, energy, gen, &theta_opt, &phi_opt)?;
            }
        }
    }
    if let Some(dir) = out {
        if let Some(w) = &mut log_writer {
            w.flush()?;
        }
        checkpoint(dir, energy, gen, &theta_opt, &phi_opt)?;
    }
    Ok(rows)
}

fn propose(
    energy: &EnergyModel,
    gen: &mut Generator,
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
    n: usize,
) -> Result<crate::mcmc::JointSample> {
    let (h, x_prop) = gen.generate(n, &mut rngs.proposal, cfg.proposal_noise, NormMode::Train)?;
    crate::mcmc::revise_proposal(energy, h, x_prop, &cfg.revision, &mut rngs.revision, None)
}

/// Fresh independent draws of `n` proposals, revised, without touching running statistics.
pub fn sample_joint<R: Rng + ?Sized>(
    energy: &EnergyModel,
    gen: &Generator,
    n: usize,
    cfg: &RevisionConfig,
    rng: &mut R,
    with_noise: bool,
) -> Result<crate::mcmc::JointSample> {
    let mut g = gen.clone();
    propose_and_revise(energy, &mut g, n, cfg, rng, with_noise, NormMode::Inference)
}
