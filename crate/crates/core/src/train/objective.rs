use serde::{Deserialize, Serialize};

use crate::diffcore::{logsumexp_row, Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::mcmc::JointSample;
use crate::nets::{collect_grads, softmax_rows, EnergyModel, Generator, NormMode, ParamGrads, Parameterized};

/// Weights of the supervised term and the two regularizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslWeights {
    pub alpha: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
}

impl Default for SslWeights {
    fn default() -> Self {
        SslWeights {
            alpha: 1.0,
            lambda_c: 0.0,
            lambda_s: 0.0,
        }
    }
}

impl SslWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("alpha", self.alpha), ("lambda_c", self.lambda_c), ("lambda_s", self.lambda_s)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.weights.{k} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Ascent direction for θ plus the scalars it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaStep {
    pub grad: ParamGrads,
    /// Value of the objective whose gradient is `grad`, with revised samples held fixed.
    pub objective: f64,
    pub u_data_mean: f64,
    pub u_model_mean: f64,
    /// Mean supervised cross-entropy; zero without a supervised batch.
    pub sup_ce: f64,
    pub r_c: f64,
    pub r_s: f64,
}

/// Ascent direction for φ.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiStep {
    pub grad: ParamGrads,
    pub mean_log_q: f64,
    /// Mean squared residual per coordinate between revised samples and `G(h)`.
    pub mse: f64,
}

fn non_empty(x: &Tensor, what: &str) -> Result<()> {
    if x.shape().len() == 2 && x.rows() > 0 {
        Ok(())
    } else {
        Err(Error::Contract(format!("{what} batch is empty")))
    }
}

fn entropy_rows(tape: &mut Tape<'_>, joint: Var) -> Result<Var> {
    let ls = tape.log_softmax(joint)?;
    let p = tape.unary(Unary::Exp, ls)?;
    let plp = tape.mul(p, ls)?;
    let s = tape.row_sum(plp)?;
    tape.unary(Unary::Negate, s)
}

struct DataTerm {
    grad: ParamGrads,
    objective: f64,
    u_mean: f64,
    sup_ce: f64,
    r_c: f64,
    r_s: f64,
}

/// Gradient of `mean u(x) + α mean log p(y|x) − λ_c R_c − λ_s R_s` over one batch.
/// Zero-weight terms are left off the tape entirely.
fn data_term(
    m: &EnergyModel,
    x: &Tensor,
    labels: Option<&[usize]>,
    alpha: f64,
    lambda_c: f64,
    lambda_s: f64,
) -> Result<DataTerm> {
    let params = m.params();
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let f = m.joint_on_tape(&mut tape, xv, true)?;
    let lse = tape.logsumexp(f.out)?;
    let u_mean = tape.mean(lse)?;
    let u_mean_value = tape.scalar(u_mean)?;
    let mut obj = u_mean;
    let mut sup_ce = 0.0;
    if let Some(y) = labels {
        let ls = tape.log_softmax(f.out)?;
        let picked = tape.pick(ls, y)?;
        let sup = tape.mean(picked)?;
        sup_ce = -tape.scalar(sup)?;
        if alpha != 0.0 {
            let w = tape.scale(sup, alpha)?;
            obj = tape.add(obj, w)?;
        }
    }
    let ent = entropy_rows(&mut tape, f.out)?;
    let rc = tape.mean(ent)?;
    let r_c = tape.scalar(rc)? + 0.0;
    if lambda_c != 0.0 {
        let w = tape.scale(rc, -lambda_c)?;
        obj = tape.add(obj, w)?;
    }
    let r_s = u_mean_value * u_mean_value;
    if lambda_s != 0.0 {
        let rs = tape.unary(Unary::Square, u_mean)?;
        let w = tape.scale(rs, -lambda_s)?;
        obj = tape.add(obj, w)?;
    }
    let objective = tape.scalar(obj)?;
    let mut grads = tape.backward(obj)?;
    Ok(DataTerm {
        grad: collect_grads(&mut grads, &f.params, &params),
        objective,
        u_mean: u_mean_value,
        sup_ce,
        r_c,
        r_s,
    })
}

fn check_labels(m: &EnergyModel, y: &[usize], rows: usize) -> Result<()> {
    if y.len() != rows {
        return Err(Error::dim("supervised batch", &[rows], &[y.len()]));
    }
    match y.iter().find(|&&c| c >= m.classes()) {
        Some(c) => Err(Error::Data(format!("label {c} out of range for {} classes", m.classes()))),
        None => Ok(()),
    }
}

/// `mean ∂u(x̃)/∂θ − mean ∂u(x)/∂θ` with the marginal potential.
pub fn unsup_theta_grad(m: &EnergyModel, x_data: &Tensor, x_rev: &Tensor) -> Result<ThetaStep> {
    non_empty(x_data, "data")?;
    non_empty(x_rev, "revised")?;
    let d = data_term(m, x_data, None, 0.0, 0.0, 0.0)?;
    let s = data_term(m, x_rev, None, 0.0, 0.0, 0.0)?;
    let mut grad = d.grad;
    grad.add_scaled(&s.grad, -1.0);
    Ok(ThetaStep {
        grad,
        objective: d.u_mean - s.u_mean,
        u_data_mean: d.u_mean,
        u_model_mean: s.u_mean,
        sup_ce: 0.0,
        r_c: d.r_c,
        r_s: d.r_s,
    })
}

/// Semi-supervised ascent direction: the unsupervised contrast over `U`, the
/// contrast over `S` plus `α ∂ mean log p(ỹ|x̃)/∂θ`, minus `λ_c ∂R_c/∂θ` and
/// `λ_s ∂R_s/∂θ` evaluated on the unsupervised data batch.
pub fn ssl_theta_grad(
    m: &EnergyModel,
    u_data: &Tensor,
    u_rev: &Tensor,
    s_data: &Tensor,
    s_labels: &[usize],
    s_rev: &Tensor,
    w: &SslWeights,
) -> Result<ThetaStep> {
    w.validate()?;
    for (x, what) in [(u_data, "unsupervised data"), (u_rev, "unsupervised revised"), (s_data, "supervised data"), (s_rev, "supervised revised")] {
        non_empty(x, what)?;
    }
    check_labels(m, s_labels, s_data.rows())?;
    let ud = data_term(m, u_data, None, 0.0, w.lambda_c, w.lambda_s)?;
    let um = data_term(m, u_rev, None, 0.0, 0.0, 0.0)?;
    let sd = data_term(m, s_data, Some(s_labels), w.alpha, 0.0, 0.0)?;
    let sm = data_term(m, s_rev, None, 0.0, 0.0, 0.0)?;
    let mut grad = ud.grad;
    grad.add_scaled(&um.grad, -1.0);
    let mut sgrad = sd.grad;
    sgrad.add_scaled(&sm.grad, -1.0);
    grad.add_scaled(&sgrad, 1.0);
    let n_u = u_data.rows() as f64;
    let n_s = s_data.rows() as f64;
    Ok(ThetaStep {
        grad,
        objective: (ud.objective - um.objective) + (sd.objective - sm.objective),
        u_data_mean: (ud.u_mean * n_u + sd.u_mean * n_s) / (n_u + n_s),
        u_model_mean: (um.u_mean * u_rev.rows() as f64 + sm.u_mean * s_rev.rows() as f64)
            / (u_rev.rows() + s_rev.rows()) as f64,
        sup_ce: sd.sup_ce,
        r_c: ud.r_c,
        r_s: ud.r_s,
    })
}

/// `mean ∂ log q_φ(x, h)/∂φ` over the revised joint samples.
pub fn phi_grad(g: &Generator, joint: &JointSample, mode: NormMode) -> Result<PhiStep> {
    non_empty(&joint.h, "joint")?;
    let (grad, mean_log_q) = g.mean_log_q_grad(&joint.x_rev, &joint.h, mode)?;
    let gh = g.decode(&joint.h, mode)?;
    let mse = joint
        .x_rev
        .data()
        .iter()
        .zip(gh.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / joint.x_rev.numel() as f64;
    Ok(PhiStep { grad, mean_log_q, mse })
}

/// Mean Shannon entropy of the class posterior.
pub fn confident_loss(m: &EnergyModel, x: &Tensor) -> Result<f64> {
    non_empty(x, "confident-loss")?;
    let p = softmax_rows(&m.energy_joint(x)?);
    let mut total = 0.0;
    for i in 0..p.rows() {
        total -= p.row(i).iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    }
    Ok(total / p.rows() as f64)
}

/// Square of the batch mean of `log Z(x; θ) = logsumexp_y u(x, y)`.
pub fn self_norm_loss(m: &EnergyModel, x: &Tensor) -> Result<f64> {
    non_empty(x, "self-normalization")?;
    let u = m.energy_marginal(x)?;
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    Ok(mean * mean)
}

/// Mean of `logsumexp_y u(x, y)` over a batch.
pub fn mean_log_z(m: &EnergyModel, x: &Tensor) -> Result<f64> {
    let j = m.energy_joint(x)?;
    Ok((0..j.rows()).map(|i| logsumexp_row(j.row(i))).sum::<f64>() / j.rows().max(1) as f64)
}
