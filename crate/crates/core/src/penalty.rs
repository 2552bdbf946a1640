//! The invariance penalty and the penalized local objective.
//!
//! A client with risk `R_i` trains on
//!
//! ```text
//! f_i(w) = R_i(w) + lambda * <grad R_i(w), w>^2
//! ```
//!
//! The penalty vanishes exactly when the parameter vector is orthogonal to
//! the local risk gradient, which holds simultaneously for every client at a
//! parameter that no environment-specific direction can improve by
//! rescaling.

use crate::error::{CoreError, Result};
use crate::model::{risk_and_grad, risk_hvp, ModelSpec, Sample};
use crate::params::ParamVec;

/// Penalty weight; `lambda = 0` reduces every objective here to the plain
/// risk, bit for bit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyConfig {
    pub lambda: f64,
}

impl PenaltyConfig {
    pub const DEFAULT_LAMBDA: f64 = 1e-3;

    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(CoreError::Domain(format!(
                "penalty weight must be finite and nonnegative, got {lambda}"
            )));
        }
        Ok(PenaltyConfig { lambda })
    }

    pub fn off() -> Self {
        PenaltyConfig { lambda: 0.0 }
    }
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            lambda: Self::DEFAULT_LAMBDA,
        }
    }
}

/// `<grad, params>^2` for an already-computed risk gradient.
pub fn penalty(params: &ParamVec, grad: &ParamVec) -> Result<f64> {
    if params.len() != grad.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "gradient has {} entries, parameters have {}",
            grad.len(),
            params.len()
        )));
    }
    let ip = grad.dot(params);
    Ok(ip * ip)
}

/// Penalized local objective `R(w) + lambda * <grad R(w), w>^2`.
pub fn local_objective(
    params: &ParamVec,
    spec: &ModelSpec,
    data: &[Sample],
    cfg: &PenaltyConfig,
) -> Result<f64> {
    let (risk, grad) = risk_and_grad(params, spec, data)?;
    if cfg.lambda == 0.0 {
        return Ok(risk);
    }
    Ok(risk + cfg.lambda * penalty(params, &grad)?)
}

/// Exact gradient of [`local_objective`]:
///
/// ```text
/// grad f(w) = g + 2 lambda <g, w> (g + H w),   g = grad R(w), H = hess R(w)
/// ```
///
/// computed from one gradient and one Hessian-vector product with the
/// parameter vector itself; the Hessian is never formed. With `lambda = 0`
/// this returns the risk gradient unchanged.
pub fn local_objective_grad(
    params: &ParamVec,
    spec: &ModelSpec,
    data: &[Sample],
    cfg: &PenaltyConfig,
) -> Result<ParamVec> {
    let (_, grad) = risk_and_grad(params, spec, data)?;
    if cfg.lambda == 0.0 {
        return Ok(grad);
    }
    let hw = risk_hvp(params, spec, data, params)?;
    Ok(penalized_grad(params, &grad, &hw, cfg.lambda))
}

/// Assembles `g + 2 lambda <g, w> (g + H w)` from precomputed pieces.
pub(crate) fn penalized_grad(
    params: &ParamVec,
    grad: &ParamVec,
    hw: &ParamVec,
    lambda: f64,
) -> ParamVec {
    let ip = grad.dot(params);
    let coeff = 2.0 * lambda * ip;
    ParamVec::from_raw(
        grad.iter()
            .zip(hw.iter())
            .map(|(g, h)| g + coeff * (g + h))
            .collect(),
    )
}

/// Largest admissible penalty weight that keeps every local objective
/// `mu_prime`-strongly convex:
///
/// ```text
/// lambda_max = (mu - mu_prime) / (8 theta mu^2 + 2 G rho beta^2)
/// ```
///
/// where `theta` is the client's initial optimality gap `R(0) - R(w*)`.
pub fn lambda_bound(
    mu: f64,
    mu_prime: f64,
    theta: f64,
    g: f64,
    rho: f64,
    beta: f64,
) -> Result<f64> {
    for (name, v) in [
        ("mu", mu),
        ("mu_prime", mu_prime),
        ("theta", theta),
        ("G", g),
        ("rho", rho),
        ("beta", beta),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(CoreError::Domain(format!(
                "{name} must be finite and nonnegative, got {v}"
            )));
        }
    }
    if mu_prime > mu {
        return Err(CoreError::Domain(format!(
            "mu_prime ({mu_prime}) must not exceed mu ({mu})"
        )));
    }
    let denom = 8.0 * theta * mu * mu + 2.0 * g * rho * beta * beta;
    if denom <= 0.0 {
        return Err(CoreError::Domain(
            "lambda bound denominator is zero; need theta > 0 or G*rho*beta > 0".into(),
        ));
    }
    Ok((mu - mu_prime) / denom)
}

/// Smoothness constant of the penalized objective:
///
/// ```text
/// L' = L + 10 lambda L^2 beta^2 + 4 lambda G^2 + 2 G rho lambda beta^2
/// ```
pub fn l_prime(l: f64, lambda: f64, beta: f64, g: f64, rho: f64) -> f64 {
    l + 10.0 * lambda * l * l * beta * beta
        + 4.0 * lambda * g * g
        + 2.0 * g * rho * lambda * beta * beta
}
