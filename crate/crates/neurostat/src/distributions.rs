//! Diagonal-Gaussian primitives: reparameterized sampling, log-density and
//! closed-form KL divergences, all built from differentiable tape ops.
//!
//! Conventions: `log_var` parameterizes the variance as `exp(log_var)`, so
//! the variance is positive by construction. Densities and divergences sum
//! over the last axis, producing one value per leading row.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

/// Mean and log-variance nodes of a diagonal Gaussian; shapes are equal and
/// the last axis is the dimension.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mean: VarId,
    pub log_var: VarId,
}

impl GaussianParams {
    pub fn new(tape: &Tape, mean: VarId, log_var: VarId) -> Result<Self> {
        if tape.shape(mean) != tape.shape(log_var) {
            return Err(Error::ShapeMismatch {
                op: "gaussian_params",
                lhs: tape.shape(mean).to_vec(),
                rhs: tape.shape(log_var).to_vec(),
            });
        }
        Ok(GaussianParams { mean, log_var })
    }
}

/// Plain-value snapshot of a diagonal Gaussian, for use outside a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianValue {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl GaussianValue {
    pub fn dim(&self) -> usize {
        *self.mean.shape().last().unwrap_or(&0)
    }

    /// Re-enters a tape as constants.
    pub fn constant(&self, tape: &mut Tape) -> GaussianParams {
        GaussianParams {
            mean: tape.constant(self.mean.clone()),
            log_var: tape.constant(self.log_var.clone()),
        }
    }
}

/// The zero-mean unit-variance prior p(c) (and the deepest latent priors).
#[derive(Clone, Copy, Debug)]
pub struct StandardNormalPrior {
    pub dim: usize,
}

impl StandardNormalPrior {
    /// Prior parameters broadcast over `rows` leading entries.
    pub fn params(&self, tape: &mut Tape, rows: usize) -> GaussianParams {
        let zeros = Tensor::zeros(&[rows, self.dim]);
        GaussianParams {
            mean: tape.constant(zeros.clone()),
            log_var: tape.constant(zeros),
        }
    }
}

/// `mean + exp(0.5·log_var) ⊙ noise`; differentiable w.r.t. the parameters.
pub fn reparam_sample(tape: &mut Tape, params: &GaussianParams, noise: VarId) -> Result<VarId> {
    if tape.shape(noise) != tape.shape(params.mean) {
        return Err(Error::ShapeMismatch {
            op: "reparam_sample",
            lhs: tape.shape(params.mean).to_vec(),
            rhs: tape.shape(noise).to_vec(),
        });
    }
    let half_lv = tape.scale(params.log_var, 0.5)?;
    let std = tape.exp(half_lv)?;
    let scaled = tape.mul(std, noise)?;
    tape.add(params.mean, scaled)
}

fn sum_last(tape: &mut Tape, id: VarId) -> Result<VarId> {
    let axis = tape.shape(id).len() - 1;
    tape.sum(id, axis)
}

/// Per-row log N(x; μ, diag σ²):
/// `Σ_j −½·ln 2π − ½·log_var_j − ½·(x_j−μ_j)²/exp(log_var_j)`.
pub fn log_pdf(tape: &mut Tape, x: VarId, params: &GaussianParams) -> Result<VarId> {
    if tape.shape(x) != tape.shape(params.mean) {
        return Err(Error::ShapeMismatch {
            op: "log_pdf",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(params.mean).to_vec(),
        });
    }
    let diff = tape.sub(x, params.mean)?;
    let diff2 = tape.square(diff)?;
    let neg_lv = tape.scale(params.log_var, -1.0)?;
    let inv_var = tape.exp(neg_lv)?;
    let maha = tape.mul(diff2, inv_var)?;
    let inner = tape.add(params.log_var, maha)?;
    let inner = tape.add_scalar(inner, LN_2PI)?;
    let per_coord = tape.scale(inner, -0.5)?;
    sum_last(tape, per_coord)
}

/// Per-row KL(q ‖ p) between diagonal Gaussians, in closed form:
/// `Σ_j ½·[log σ²_p − log σ²_q + (σ²_q + (μ_q−μ_p)²)/σ²_p − 1]`.
pub fn kl_diag(tape: &mut Tape, q: &GaussianParams, p: &GaussianParams) -> Result<VarId> {
    if tape.shape(q.mean) != tape.shape(p.mean) {
        return Err(Error::ShapeMismatch {
            op: "kl_diag",
            lhs: tape.shape(q.mean).to_vec(),
            rhs: tape.shape(p.mean).to_vec(),
        });
    }
    let lv_diff = tape.sub(p.log_var, q.log_var)?;
    let var_q = tape.exp(q.log_var)?;
    let mean_diff = tape.sub(q.mean, p.mean)?;
    let mean_diff2 = tape.square(mean_diff)?;
    let numerator = tape.add(var_q, mean_diff2)?;
    let neg_lv_p = tape.scale(p.log_var, -1.0)?;
    let inv_var_p = tape.exp(neg_lv_p)?;
    let ratio = tape.mul(numerator, inv_var_p)?;
    let inner = tape.add(lv_diff, ratio)?;
    let inner = tape.add_scalar(inner, -1.0)?;
    let per_coord = tape.scale(inner, 0.5)?;
    sum_last(tape, per_coord)
}

/// Per-row KL(q ‖ N(0, I)), the fused special case
/// `Σ_j ½·[σ²_q + μ_q² − 1 − log σ²_q]`.
pub fn kl_to_standard(tape: &mut Tape, q: &GaussianParams) -> Result<VarId> {
    let var_q = tape.exp(q.log_var)?;
    let mean2 = tape.square(q.mean)?;
    let s = tape.add(var_q, mean2)?;
    let s = tape.add_scalar(s, -1.0)?;
    let s = tape.sub(s, q.log_var)?;
    let per_coord = tape.scale(s, 0.5)?;
    sum_last(tape, per_coord)
}

/// Closed-form KL between two plain-value diagonal Gaussians (single rows),
/// routed through the same tape composite as the training objective.
pub fn kl_diag_scalar(q: &GaussianValue, p: &GaussianValue) -> Result<f64> {
    let mut tape = Tape::new();
    let qp = q.constant(&mut tape);
    let pp = p.constant(&mut tape);
    let kl = kl_diag(&mut tape, &qp, &pp)?;
    let total = tape.sum_all(kl)?;
    tape.scalar_value(total)
}
