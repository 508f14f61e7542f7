//! Uncertainty-aware gating of composition coefficients.
//!
//! `U = eta * S + (1 - eta) * V` mixes the input sensitivity of each
//! coefficient's mean with its standardized deviation from batch
//! statistics. The threshold `Gamma = psi1 * (1 + psi2 * U)` drives a hard
//! gate at inference and a sigmoid gate of temperature `rho` in training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::inference::InferenceNet;

/// Stabilizer added to the batch standard deviation.
pub const EPS_V: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateParams {
    pub psi1: f64,
    pub psi2: f64,
    pub rho: f64,
    pub eta: f64,
    pub psi1_0: f64,
    pub psi2_0: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        GateParams { psi1: 0.05, psi2: 1.0, rho: 0.05, eta: 0.5, psi1_0: 0.05, psi2_0: 1.0 }
    }
}

impl GateParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::config("gate.rho", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config("gate.eta", "must lie in [0, 1]"));
        }
        if !(self.psi1 >= 0.0) {
            return Err(Error::config("gate.psi1", "must be non-negative"));
        }
        for (name, v) in [("gate.psi2", self.psi2), ("gate.psi1_0", self.psi1_0), ("gate.psi2_0", self.psi2_0)] {
            if !v.is_finite() {
                return Err(Error::config(name, "must be finite"));
            }
        }
        Ok(())
    }
}

/// Weights of the three gate regularizers and their constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegWeights {
    pub boundary: f64,
    pub exploration: f64,
    pub uncertainty: f64,
    pub margin: f64,
    pub eps: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        RegWeights { boundary: 1e-4, exploration: 1e-3, uncertainty: 1e-2, margin: 0.1, eps: 1e-5 }
    }
}

impl RegWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gate.lambda_b", self.boundary), ("gate.lambda_e", self.exploration), ("gate.lambda_u", self.uncertainty)] {
            if !(v >= 0.0) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        if !(self.margin > 0.0) {
            return Err(Error::config("gate.margin", "must be positive"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("gate.eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    pub s: Tensor,
    pub v: Tensor,
    pub u: Tensor,
    pub gamma: Tensor,
    pub omega: Tensor,
}

impl GateState {
    /// Gate state of the mean coefficients `net` assigns to `x`, standardized
    /// by `stats` or, without them, by the batch's own statistics.
    pub fn compute(x: &Tensor, net: &InferenceNet, stats: Option<&BatchStats>, gp: &GateParams) -> Result<GateState> {
        let mu = net.infer_posterior(x)?.mu;
        let s = gradient_sensitivity(x, net)?;
        let v = match stats {
            Some(st) => st.deviation(&mu)?,
            None => distributional_deviation(&mu)?,
        };
        let u = uncertainty(&s, &v, gp.eta)?;
        let gamma = threshold(&u, gp);
        let omega = soft_gate(&mu, &gamma, gp.rho)?;
        Ok(GateState { s, v, u, gamma, omega })
    }
}

/// `|| d mu(x) / d x ||` per coefficient.
pub fn gradient_sensitivity(x: &Tensor, net: &InferenceNet) -> Result<Tensor> {
    net.mu_input_gradient_norms(x)
}

/// Column means and population standard deviations of a `B x K` batch.
pub fn batch_moments(z: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if z.shape().len() != 2 || z.rows() == 0 {
        return Err(Error::shape("batch_moments", format!("need a non-empty B x K batch, got {:?}", z.shape())));
    }
    let (b, k) = (z.rows(), z.cols());
    let mut mean = vec![0.0; k];
    for r in 0..b {
        for (m, v) in mean.iter_mut().zip(z.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut var = vec![0.0; k];
    for r in 0..b {
        for ((s, v), m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    Ok((mean, var.into_iter().map(|s| (s / b as f64).sqrt()).collect()))
}

fn standardized(z: &Tensor, mean: &[f64], sd: &[f64]) -> Result<Tensor> {
    if z.shape().len() != 2 || z.cols() != mean.len() || mean.len() != sd.len() {
        return Err(Error::shape("distributional_deviation", format!("{:?} against {} statistics", z.shape(), mean.len())));
    }
    let k = z.cols();
    Ok(Tensor::from_fn(z.rows(), k, |r, c| ((z.get(r, c) - mean[c]) / (sd[c] + EPS_V)).abs()))
}

/// `|z - mu_B| / (sigma_B + EPS_V)` with the batch's own statistics.
pub fn distributional_deviation(z: &Tensor) -> Result<Tensor> {
    let (mean, sd) = batch_moments(z)?;
    standardized(z, &mean, &sd)
}

/// Exponential moving averages of batch statistics, used in place of the
/// batch's own statistics at inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub decay: f64,
    pub updates: u64,
}

impl BatchStats {
    pub fn new(k: usize, decay: f64) -> Self {
        BatchStats { mean: vec![0.0; k], sd: vec![1.0; k], decay, updates: 0 }
    }

    pub fn update(&mut self, z: &Tensor) -> Result<()> {
        let (mean, sd) = batch_moments(z)?;
        if mean.len() != self.mean.len() {
            return Err(Error::shape("batch_stats", format!("{} columns for {} statistics", mean.len(), self.mean.len())));
        }
        if self.updates == 0 {
            self.mean = mean;
            self.sd = sd;
        } else {
            let d = self.decay;
            for (a, b) in self.mean.iter_mut().zip(mean) {
                *a = d * *a + (1.0 - d) * b;
            }
            for (a, b) in self.sd.iter_mut().zip(sd) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        self.updates += 1;
        Ok(())
    }

    pub fn deviation(&self, z: &Tensor) -> Result<Tensor> {
        standardized(z, &self.mean, &self.sd)
    }
}

pub fn uncertainty(s: &Tensor, v: &Tensor, eta: f64) -> Result<Tensor> {
    s.zip_map(v, |s, v| eta * s + (1.0 - eta) * v)
}

pub fn threshold(u: &Tensor, gp: &GateParams) -> Tensor {
    u.map(|u| gp.psi1 * (1.0 + gp.psi2 * u))
}

/// `z` where `|z| >= Gamma`, else 0.
pub fn hard_gate(z: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    z.zip_map(gamma, |z, g| if z.abs() >= g { z } else { 0.0 })
}

/// `sigmoid((|z| - Gamma) / rho)`.
pub fn soft_gate(z: &Tensor, gamma: &Tensor, rho: f64) -> Result<Tensor> {
    if !(rho > 0.0) {
        return Err(Error::Invalid(format!("gate temperature must be positive, got {rho}")));
    }
    z.zip_map(gamma, |z, g| crate::autodiff::sigmoid((z.abs() - g) / rho))
}

/// `sum max(0, m - |z - Gamma|)`.
pub fn boundary_loss(z: &Tensor, gamma: &Tensor, m: f64) -> Result<f64> {
    Ok(z.zip_map(gamma, |z, g| (m - (z - g).abs()).max(0.0))?.sum())
}

/// `-log(|psi1 - psi1_0| + eps) - log(|psi2 - psi2_0| + eps)`.
pub fn exploration_loss(gp: &GateParams, eps: f64) -> f64 {
    -((gp.psi1 - gp.psi1_0).abs() + eps).ln() - ((gp.psi2 - gp.psi2_0).abs() + eps).ln()
}

/// Sum of `U` over coefficients that survived the gate.
pub fn uncertainty_loss(u: &Tensor, gated: &Tensor) -> Result<f64> {
    Ok(u.zip_map(gated, |u, z| if z != 0.0 { u } else { 0.0 })?.sum())
}

/// `lambda_b * L_b + lambda_e * L_e + lambda_u * L_u` with the hard indicator.
pub fn reg_total(z: &Tensor, state: &GateState, gp: &GateParams, w: &RegWeights) -> Result<f64> {
    let gated = hard_gate(z, &state.gamma)?;
    Ok(w.boundary * boundary_loss(z, &state.gamma, w.margin)?
        + w.exploration * exploration_loss(gp, w.eps)
        + w.uncertainty * uncertainty_loss(&state.u, &gated)?)
}

/// Fraction of non-zero coefficients.
pub fn gated_ratio(gated: &Tensor) -> Result<f64> {
    if gated.is_empty() {
        return Err(Error::Invalid("gated ratio of an empty coefficient set".into()));
    }
    Ok(gated.data().iter().filter(|&&v| v != 0.0).count() as f64 / gated.len() as f64)
}

/// Trainable gate parameters `psi1`, `psi2` as 1 x 1 graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub psi1: Var,
    pub psi2: Var,
}

impl GateVars {
    pub fn bind(g: &mut Graph, gp: &GateParams) -> Result<GateVars> {
        Ok(GateVars { psi1: g.param(Tensor::scalar(gp.psi1))?, psi2: g.param(Tensor::scalar(gp.psi2))? })
    }

    /// `Gamma = psi1 + psi1 * psi2 * U` for a fixed uncertainty matrix.
    pub fn threshold(&self, g: &mut Graph, u: &Tensor) -> Result<Var> {
        let (rows, cols) = (u.rows(), u.cols());
        let p1 = g.broadcast_scalar(self.psi1, rows, cols)?;
        let p12 = g.mul(self.psi1, self.psi2)?;
        let p12 = g.broadcast_scalar(p12, rows, cols)?;
        let uv = g.constant(u.clone());
        let scaled = g.mul(p12, uv)?;
        g.add(p1, scaled)
    }
}

pub fn soft_gate_nodes(g: &mut Graph, z: Var, gamma: Var, rho: f64) -> Result<Var> {
    let a = g.abs(z)?;
    let d = g.sub(a, gamma)?;
    let d = g.scale(d, 1.0 / rho)?;
    g.sigmoid(d)
}

pub fn boundary_loss_nodes(g: &mut Graph, z: Var, gamma: Var, m: f64) -> Result<Var> {
    let d = g.sub(z, gamma)?;
    let d = g.abs(d)?;
    let d = g.neg(d)?;
    let d = g.add_scalar(d, m)?;
    let d = g.relu(d)?;
    g.sum(d)
}

pub fn exploration_loss_nodes(g: &mut Graph, vars: &GateVars, gp: &GateParams, eps: f64) -> Result<Var> {
    let mut total = None;
    for (v, v0) in [(vars.psi1, gp.psi1_0), (vars.psi2, gp.psi2_0)] {
        let d = g.add_scalar(v, -v0)?;
        let d = g.abs(d)?;
        let d = g.add_scalar(d, eps)?;
        let l = g.log(d)?;
        let l = g.neg(l)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    g.sum(total.expect("two terms"))
}

/// Soft surrogate `sum U * Omega` of the uncertainty loss.
pub fn uncertainty_loss_nodes(g: &mut Graph, u: &Tensor, omega: Var) -> Result<Var> {
    let uv = g.constant(u.clone());
    let p = g.mul(uv, omega)?;
    g.sum(p)
}

/// Training form of [`reg_total`], with `Omega` in place of the indicator.
pub fn reg_total_nodes(
    g: &mut Graph,
    z: Var,
    gamma: Var,
    omega: Var,
    u: &Tensor,
    vars: &GateVars,
    gp: &GateParams,
    w: &RegWeights,
) -> Result<Var> {
    let b = boundary_loss_nodes(g, z, gamma, w.margin)?;
    let e = exploration_loss_nodes(g, vars, gp, w.eps)?;
    let un = uncertainty_loss_nodes(g, u, omega)?;
    let b = g.scale(b, w.boundary)?;
    let e = g.scale(e, w.exploration)?;
    let un = g.scale(un, w.uncertainty)?;
    let t = g.add(b, e)?;
    g.add(t, un)
}
