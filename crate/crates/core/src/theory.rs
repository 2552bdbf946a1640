//! Numerical forms of the convergence and generalization analysis: the
//! per-round contribution metric, closed-form contribution and staleness
//! bounds, empirical constants estimation, the OOD risk bound, and the
//! convergence bound for the running parameter average.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{empirical_risk, risk_grad, risk_hvp, ModelSpec};
use crate::params::ParamVec;
use crate::penalty::{self, PenaltyConfig};
use crate::rng::substream;
use crate::sim::{Client, FedConfig, RoundRecord};

/// Floor on the squared global gradient norm before dividing by it.
pub const GRAD_FLOOR: f64 = 1e-24;

/// Empirical per-round contribution of one client:
///
/// ```text
/// C = eta (n_i / n) [<g, g_i> - (L/2) |g_i|^2] / |g|^2
/// ```
///
/// where `g` is the global risk gradient at the current parameters and
/// `g_i` the client's possibly stale risk gradient. Positive values mean
/// the client's buffered upload moves the aggregate downhill.
pub fn contribution(
    global_grad: &ParamVec,
    client_grad_stale: &ParamVec,
    eta: f64,
    n_i: f64,
    n: f64,
    l: f64,
) -> Result<f64> {
    if global_grad.len() != client_grad_stale.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "global gradient has {} entries, client gradient {}",
            global_grad.len(),
            client_grad_stale.len()
        )));
    }
    for (name, v) in [("eta", eta), ("n_i", n_i), ("n", n), ("L", l)] {
        if !v.is_finite() {
            return Err(CoreError::Domain(format!("{name} must be finite, got {v}")));
        }
    }
    if n_i <= 0.0 || n < n_i {
        return Err(CoreError::Domain(format!(
            "need 0 < n_i <= n, got n_i = {n_i}, n = {n}"
        )));
    }
    let denom = global_grad.dot(global_grad);
    if denom <= GRAD_FLOOR {
        return Err(CoreError::DegenerateGradient { floor: GRAD_FLOOR });
    }
    let align = global_grad.dot(client_grad_stale);
    let stale_sq = client_grad_stale.dot(client_grad_stale);
    Ok(eta * (n_i / n) * (align - 0.5 * l * stale_sq) / denom)
}

/// Theoretical contribution of a heterogeneous client whose optimum sits at
/// distance `we_norm` from the shared optimum, with alignment `kappa` and
/// perturbation `nu`, generalized to an explicit shared-optimum norm:
///
/// ```text
/// C = eta r [ U ((s-kappa)^2 - nu (we - nu))
///             / (sqrt((s-kappa)^2 + nu^2) sqrt((s-kappa)^2 + (we - nu)^2))
///           - (L/2) V^2 ]
/// ```
///
/// with `s = wi_norm`. `U` and `V` bound the client-to-global gradient norm
/// ratio from above and below.
pub fn hetero_contribution_with_center(
    kappa: f64,
    nu: f64,
    we_norm: f64,
    u: f64,
    v: f64,
    l: f64,
    eta: f64,
    weight_ratio: f64,
    wi_norm: f64,
) -> Result<f64> {
    if !(0.0 < kappa && kappa < 1.0) {
        return Err(CoreError::Domain(format!(
            "kappa must lie in (0, 1), got {kappa}"
        )));
    }
    for (name, val) in [
        ("nu", nu),
        ("we_norm", we_norm),
        ("U", u),
        ("V", v),
        ("L", l),
        ("eta", eta),
        ("weight_ratio", weight_ratio),
        ("wi_norm", wi_norm),
    ] {
        if !val.is_finite() {
            return Err(CoreError::Domain(format!("{name} must be finite, got {val}")));
        }
    }
    let a = (wi_norm - kappa) * (wi_norm - kappa);
    let denom = (a + nu * nu).sqrt() * (a + (we_norm - nu) * (we_norm - nu)).sqrt();
    if denom <= 0.0 {
        return Err(CoreError::Domain(
            "contribution denominator vanishes for these arguments".into(),
        ));
    }
    let cos_term = (a - nu * (we_norm - nu)) / denom;
    Ok(eta * weight_ratio * (u * cos_term - 0.5 * l * v * v))
}

/// [`hetero_contribution_with_center`] with the shared optimum normalized
/// to unit length.
pub fn hetero_contribution_theory(
    kappa: f64,
    nu: f64,
    we_norm: f64,
    u: f64,
    v: f64,
    l: f64,
    eta: f64,
    weight_ratio: f64,
) -> Result<f64> {
    hetero_contribution_with_center(kappa, nu, we_norm, u, v, l, eta, weight_ratio, 1.0)
}

/// Upper bound on the stale-to-current gradient norm ratio:
/// `1 + L G tau / |grad R(w_t)|`.
pub fn stale_ratio_bound(l: f64, g: f64, tau: usize, grad_norm_now: f64) -> Result<f64> {
    for (name, v) in [("L", l), ("G", g)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(CoreError::Domain(format!(
                "{name} must be finite and nonnegative, got {v}"
            )));
        }
    }
    if !(grad_norm_now > 0.0 && grad_norm_now.is_finite()) {
        return Err(CoreError::Domain(format!(
            "current gradient norm must be positive, got {grad_norm_now}"
        )));
    }
    Ok(1.0 + l * g * tau as f64 / grad_norm_now)
}

/// Constants of the smoothness/convexity assumptions, estimated from a run
/// or supplied analytically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// Largest Hessian eigenvalue seen (smoothness).
    #[serde(rename = "L")]
    pub l: f64,
    /// Smallest Hessian eigenvalue seen (strong convexity; 0 if none).
    pub mu: f64,
    /// Largest gradient norm seen.
    #[serde(rename = "G")]
    pub g: f64,
    /// Largest distance from an iterate to the global optimum estimate.
    #[serde(rename = "B")]
    pub b: f64,
    /// Largest parameter norm seen.
    pub beta: f64,
    /// Largest Hessian-difference quotient seen (Hessian Lipschitz).
    pub rho: f64,
    /// Largest distance from a client's solo optimum to the global one.
    pub phi: f64,
    /// Per-client initial optimality gaps `R_i(0) - R_i(w_i*)`.
    pub theta: Vec<f64>,
    /// Smoothness of the penalized objective.
    pub l_prime: f64,
    /// Strong-convexity floor kept for the penalized objective.
    pub mu_prime: f64,
    /// Largest penalty weight for which that floor is guaranteed.
    pub lambda_max: f64,
    /// Non-fatal estimation caveats.
    pub warnings: Vec<String>,
}

impl TheoryConstants {
    /// Checks the internal ordering the assumptions imply.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("L", self.l),
            ("mu", self.mu),
            ("G", self.g),
            ("B", self.b),
            ("beta", self.beta),
            ("rho", self.rho),
            ("phi", self.phi),
            ("L_prime", self.l_prime),
            ("mu_prime", self.mu_prime),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::Contract(format!(
                    "constant {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.mu > self.l {
            return Err(CoreError::Contract(format!(
                "mu = {} exceeds L = {}",
                self.mu, self.l
            )));
        }
        if self.mu_prime > self.mu {
            return Err(CoreError::Contract(format!(
                "mu_prime = {} exceeds mu = {}",
                self.mu_prime, self.mu
            )));
        }
        if self.l_prime < self.l {
            return Err(CoreError::Contract(format!(
                "L_prime = {} is below L = {}",
                self.l_prime, self.l
            )));
        }
        Ok(())
    }
}

fn unit_random(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> ParamVec {
    loop {
        let v: Vec<f64> = (0..d).map(|_| crate::rng::normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return ParamVec::from_raw(v.iter().map(|x| x / n).collect());
        }
    }
}

/// Power iteration for the largest eigenvalue of a symmetric PSD-or-not
/// operator given by `apply`. Returns the Rayleigh quotient and whether the
/// iteration converged within the cap.
fn power_largest(
    apply: &dyn Fn(&ParamVec) -> Result<ParamVec>,
    d: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, bool)> {
    const CAP: usize = 500;
    const TOL: f64 = 1e-11;
    let mut v = unit_random(d, rng);
    let mut prev = f64::INFINITY;
    for _ in 0..CAP {
        let hv = apply(&v)?;
        let norm = hv.norm();
        if norm < 1e-300 {
            // The operator annihilates the probe: eigenvalue 0.
            return Ok((0.0, true));
        }
        let rayleigh = v.dot(&hv);
        if (rayleigh - prev).abs() <= TOL * rayleigh.abs().max(1.0) {
            return Ok((rayleigh, true));
        }
        prev = rayleigh;
        v = hv.scale(1.0 / norm);
    }
    Ok((prev, false))
}

/// Extreme eigenvalues via power iteration: the largest directly, the
/// smallest through the shifted operator `cI - H`.
fn extreme_eigs(
    apply: &dyn Fn(&ParamVec) -> Result<ParamVec>,
    d: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    warnings: &mut Vec<String>,
    label: &str,
) -> Result<(f64, f64)> {
    let (top, ok) = power_largest(apply, d, rng)?;
    if !ok {
        warnings.push(format!("power iteration for {label} hit the iteration cap"));
    }
    let c = top.abs() * (1.0 + 1e-9) + 1e-12;
    let shifted = |v: &ParamVec| -> Result<ParamVec> {
        let hv = apply(v)?;
        Ok(v.scale(c).axpy(-1.0, &hv))
    };
    let (shift_top, ok2) = power_largest(&shifted, d, rng)?;
    if !ok2 {
        warnings.push(format!(
            "shifted power iteration for {label} hit the iteration cap"
        ));
    }
    Ok((c - shift_top, top))
}

/// Cyclic Jacobi eigenvalue sweep on a dense symmetric matrix, used as the
/// exact cross-check for quadratic (linear squared-error) models.
fn jacobi_eigenvalues(mut a: Vec<f64>, d: usize) -> Vec<f64> {
    let scale: f64 = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q].abs();
            }
        }
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eigs
}

fn client_weights(clients: &[Client]) -> (Vec<f64>, f64) {
    let n: f64 = clients.iter().map(|c| c.spec.weight_n as f64).sum();
    (
        clients
            .iter()
            .map(|c| c.spec.weight_n as f64 / n)
            .collect(),
        n,
    )
}

/// Volume-weighted risk over all clients' training data.
pub fn global_risk(params: &ParamVec, spec: &ModelSpec, clients: &[Client]) -> Result<f64> {
    let (weights, _) = client_weights(clients);
    let mut out = 0.0;
    for (c, w) in clients.iter().zip(weights) {
        out += w * empirical_risk(params, spec, &c.train)?;
    }
    Ok(out)
}

/// Volume-weighted risk gradient over all clients' training data.
pub fn global_risk_grad(
    params: &ParamVec,
    spec: &ModelSpec,
    clients: &[Client],
) -> Result<ParamVec> {
    let (weights, _) = client_weights(clients);
    let mut out = vec![0.0; params.len()];
    for (c, w) in clients.iter().zip(weights) {
        let g = risk_grad(params, spec, &c.train)?;
        for (o, v) in out.iter_mut().zip(g.iter()) {
            *o += w * v;
        }
    }
    Ok(ParamVec::from_raw(out))
}

/// Volume-weighted penalized objective over all clients.
pub fn global_objective(
    params: &ParamVec,
    spec: &ModelSpec,
    clients: &[Client],
    lambda: f64,
) -> Result<f64> {
    let cfg = PenaltyConfig::new(lambda)?;
    let (weights, _) = client_weights(clients);
    let mut out = 0.0;
    for (c, w) in clients.iter().zip(weights) {
        out += w * penalty::local_objective(params, spec, &c.train, &cfg)?;
    }
    Ok(out)
}

/// Volume-weighted gradient of the penalized objective.
pub fn global_objective_grad(
    params: &ParamVec,
    spec: &ModelSpec,
    clients: &[Client],
    lambda: f64,
) -> Result<ParamVec> {
    let cfg = PenaltyConfig::new(lambda)?;
    let (weights, _) = client_weights(clients);
    let mut out = vec![0.0; params.len()];
    for (c, w) in clients.iter().zip(weights) {
        let g = penalty::local_objective_grad(params, spec, &c.train, &cfg)?;
        for (o, v) in out.iter_mut().zip(g.iter()) {
            *o += w * v;
        }
    }
    Ok(ParamVec::from_raw(out))
}

fn global_hvp(
    params: &ParamVec,
    spec: &ModelSpec,
    clients: &[Client],
    v: &ParamVec,
) -> Result<ParamVec> {
    let (weights, _) = client_weights(clients);
    let mut out = vec![0.0; params.len()];
    for (c, w) in clients.iter().zip(weights) {
        let hv = risk_hvp(params, spec, &c.train, v)?;
        for (o, x) in out.iter_mut().zip(hv.iter()) {
            *o += w * x;
        }
    }
    Ok(ParamVec::from_raw(out))
}

/// Gradient descent to a high-precision minimizer, used for the optimum
/// estimates the constants need.
fn descend(
    start: &ParamVec,
    steps: usize,
    eta: f64,
    grad: &dyn Fn(&ParamVec) -> Result<ParamVec>,
) -> Result<(ParamVec, f64)> {
    let mut w = start.clone();
    let mut gnorm = f64::INFINITY;
    for _ in 0..steps {
        let g = grad(&w)?;
        gnorm = g.norm();
        if gnorm <= 1e-13 {
            break;
        }
        w = w.axpy(-eta, &g);
        if !w.is_finite() {
            return Err(CoreError::Numerical {
                round: 0,
                client: 0,
                detail: "descent diverged while estimating an optimum".into(),
            });
        }
    }
    Ok((w, gnorm))
}

/// Up to `k` roughly evenly spaced points of the trajectory, always
/// including the first and last.
fn sample_points<'a>(trajectory: &'a [ParamVec], k: usize) -> Vec<&'a ParamVec> {
    let n = trajectory.len();
    if n <= k {
        return trajectory.iter().collect();
    }
    (0..k)
        .map(|i| &trajectory[i * (n - 1) / (k - 1)])
        .collect()
}

/// Empirical plug-in estimates of the assumption constants from a run's
/// broadcast trajectory.
///
/// Curvature extremes come from Hessian-vector power iteration at sampled
/// trajectory points, cross-checked against an exact Jacobi eigensolve for
/// small linear squared-error models. Optima are estimated by long
/// gradient-descent runs; `mu_prime` defaults to half the strong-convexity
/// estimate. Estimation caveats land in the returned `warnings` instead of
/// failing the call.
pub fn estimate_constants(
    trajectory: &[ParamVec],
    clients: &[Client],
    cfg: &FedConfig,
) -> Result<TheoryConstants> {
    if trajectory.is_empty() {
        return Err(CoreError::Domain("constants need a nonempty trajectory".into()));
    }
    if clients.is_empty() {
        return Err(CoreError::Domain("constants need at least one client".into()));
    }
    let spec = &cfg.model;
    let d = spec.d_model();
    let lambda = cfg.penalty.lambda;
    let mut warnings = Vec::new();
    let mut rng = substream(cfg.seed, "constants-probe");

    // Curvature extremes: union Hessian at sampled points, each client's
    // Hessian at the last point.
    let mut l_hat: f64 = 0.0;
    let mut mu_hat = f64::INFINITY;
    let union_pts = sample_points(trajectory, 3);
    for (k, point) in union_pts.iter().enumerate() {
        let apply = |v: &ParamVec| global_hvp(point, spec, clients, v);
        let (lo, hi) = extreme_eigs(&apply, d, &mut rng, &mut warnings, &format!("union point {k}"))?;
        l_hat = l_hat.max(hi);
        mu_hat = mu_hat.min(lo);
    }
    let last = trajectory.last().expect("trajectory checked nonempty");
    for c in clients {
        let apply = |v: &ParamVec| risk_hvp(last, spec, &c.train, v);
        let (lo, hi) = extreme_eigs(
            &apply,
            d,
            &mut rng,
            &mut warnings,
            &format!("client {}", c.spec.id),
        )?;
        l_hat = l_hat.max(hi);
        mu_hat = mu_hat.min(lo);
    }
    // Exact route for small quadratic models.
    if matches!(spec.arch, crate::model::Arch::Linear { .. }) && d <= 64 {
        let mut exact_lo = f64::INFINITY;
        let mut exact_hi: f64 = 0.0;
        let dense =
            |apply: &dyn Fn(&ParamVec) -> Result<ParamVec>| -> Result<Vec<f64>> {
                let mut h = vec![0.0; d * d];
                for j in 0..d {
                    let mut e = vec![0.0; d];
                    e[j] = 1.0;
                    let col = apply(&ParamVec::from_raw(e))?;
                    for (i, v) in col.iter().enumerate() {
                        h[i * d + j] = *v;
                    }
                }
                Ok(h)
            };
        let union_apply = |v: &ParamVec| global_hvp(last, spec, clients, v);
        let eigs = jacobi_eigenvalues(dense(&union_apply)?, d);
        exact_lo = exact_lo.min(eigs[0]);
        exact_hi = exact_hi.max(eigs[d - 1]);
        for c in clients {
            let apply = |v: &ParamVec| risk_hvp(last, spec, &c.train, v);
            let eigs = jacobi_eigenvalues(dense(&apply)?, d);
            exact_lo = exact_lo.min(eigs[0]);
            exact_hi = exact_hi.max(eigs[d - 1]);
        }
        if (exact_hi - l_hat).abs() > 1e-4 * exact_hi.max(1.0)
            || (exact_lo - mu_hat).abs() > 1e-4 * exact_hi.max(1.0)
        {
            warnings.push(format!(
                "power iteration ({mu_hat:.6e}..{l_hat:.6e}) disagrees with exact \
                 eigenvalues ({exact_lo:.6e}..{exact_hi:.6e}); keeping the exact values"
            ));
        }
        l_hat = exact_hi;
        mu_hat = exact_lo;
    }
    if mu_hat < 0.0 {
        warnings.push(format!(
            "smallest observed curvature {mu_hat:.3e} is negative; flooring mu at 0"
        ));
        mu_hat = 0.0;
    }
    mu_hat = mu_hat.min(l_hat);

    // Gradient and iterate extremes over the whole trajectory.
    let mut g_hat: f64 = 0.0;
    let mut beta_hat: f64 = 0.0;
    for w in trajectory {
        beta_hat = beta_hat.max(w.norm());
        g_hat = g_hat.max(global_risk_grad(w, spec, clients)?.norm());
        for c in clients {
            g_hat = g_hat.max(risk_grad(w, spec, &c.train)?.norm());
        }
    }

    // Hessian Lipschitz quotients between sampled trajectory points.
    let mut rho_hat: f64 = 0.0;
    let rho_pts = sample_points(trajectory, 5);
    for pair in rho_pts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let gap = a.distance(b);
        if gap < 1e-12 {
            continue;
        }
        let probe = unit_random(d, &mut rng);
        let diff_union = global_hvp(a, spec, clients, &probe)?
            .sub(&global_hvp(b, spec, clients, &probe)?);
        rho_hat = rho_hat.max(diff_union.norm() / gap);
        for c in clients {
            let diff = risk_hvp(a, spec, &c.train, &probe)?
                .sub(&risk_hvp(b, spec, &c.train, &probe)?);
            rho_hat = rho_hat.max(diff.norm() / gap);
        }
    }

    // Optima: the penalized global minimizer and each client's solo risk
    // minimizer, both by long descent runs.
    const DESCENT_STEPS: usize = 4000;
    let obj_grad = |w: &ParamVec| global_objective_grad(w, spec, clients, lambda);
    let (w_global, res) = descend(last, DESCENT_STEPS, cfg.eta, &obj_grad)?;
    if res > 1e-8 {
        warnings.push(format!(
            "global optimum estimate stopped with gradient norm {res:.3e}"
        ));
    }
    beta_hat = beta_hat.max(w_global.norm());
    let b_hat = trajectory
        .iter()
        .map(|w| w.distance(&w_global))
        .fold(0.0, f64::max);

    let zero = ParamVec::zeros(d);
    let mut phi_hat: f64 = 0.0;
    let mut theta = Vec::with_capacity(clients.len());
    for c in clients {
        let solo_grad = |w: &ParamVec| risk_grad(w, spec, &c.train);
        let (w_solo, res) = descend(&zero, DESCENT_STEPS, cfg.eta, &solo_grad)?;
        if res > 1e-8 {
            warnings.push(format!(
                "solo optimum for client {} stopped with gradient norm {res:.3e}",
                c.spec.id
            ));
        }
        beta_hat = beta_hat.max(w_solo.norm());
        phi_hat = phi_hat.max(w_solo.distance(&w_global));
        let gap = empirical_risk(&zero, spec, &c.train)? - empirical_risk(&w_solo, spec, &c.train)?;
        theta.push(gap.max(0.0));
    }

    let mu_prime = mu_hat / 2.0;
    let l_prime = penalty::l_prime(l_hat, lambda, beta_hat, g_hat, rho_hat);
    let theta_max = theta.iter().copied().fold(0.0, f64::max);
    let lambda_max = match penalty::lambda_bound(mu_hat, mu_prime, theta_max, g_hat, rho_hat, beta_hat)
    {
        Ok(v) => v,
        Err(_) => {
            warnings.push(
                "penalty curvature terms vanish; no finite lambda bound applies".into(),
            );
            f64::INFINITY
        }
    };

    let constants = TheoryConstants {
        l: l_hat,
        mu: mu_hat,
        g: g_hat,
        b: b_hat,
        beta: beta_hat,
        rho: rho_hat,
        phi: phi_hat,
        theta,
        l_prime,
        mu_prime,
        lambda_max,
        warnings,
    };
    constants.validate()?;
    Ok(constants)
}

/// Per-client terms the OOD bound consumes, all evaluated at the same `w`.
#[derive(Clone, Copy, Debug)]
pub struct OodClientEval {
    pub risk_at_w: f64,
    pub risk_at_zero: f64,
    /// `<grad R_i(w), w>`.
    pub grad_dot_w: f64,
}

/// Upper bound on the risk under any affine mixture of the client
/// distributions with weights at least `-upsilon`:
///
/// ```text
/// mean_i R_i(w) + (1 + N upsilon) sup_ij (R_i(0) - R_j(0))
///               + 2 (1 + N upsilon) sup_i <grad R_i(w), w>
/// ```
pub fn ood_risk_bound(clients: &[OodClientEval], upsilon: f64, n_id: usize) -> Result<f64> {
    if clients.is_empty() {
        return Err(CoreError::Domain("OOD bound needs at least one client".into()));
    }
    if !(upsilon.is_finite() && upsilon >= 0.0) {
        return Err(CoreError::Domain(format!(
            "upsilon must be finite and nonnegative, got {upsilon}"
        )));
    }
    if n_id == 0 {
        return Err(CoreError::Domain("N_id must be at least 1".into()));
    }
    let mean_risk = clients.iter().map(|c| c.risk_at_w).sum::<f64>() / clients.len() as f64;
    let max_zero = clients
        .iter()
        .map(|c| c.risk_at_zero)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_zero = clients
        .iter()
        .map(|c| c.risk_at_zero)
        .fold(f64::INFINITY, f64::min);
    let sup_pen = clients
        .iter()
        .map(|c| c.grad_dot_w)
        .fold(f64::NEG_INFINITY, f64::max);
    let amp = 1.0 + n_id as f64 * upsilon;
    Ok(mean_risk + amp * (max_zero - min_zero) + 2.0 * amp * sup_pen)
}

/// Brute-force maximum of `sum_i xi_i R_i` over a grid on the affine
/// weight set `{xi_i >= -upsilon, sum xi = 1}`, with `steps` grid points
/// per free coordinate.
pub fn affine_grid_max(risks: &[f64], upsilon: f64, steps: usize) -> Result<f64> {
    let n = risks.len();
    if n == 0 {
        return Err(CoreError::Domain("grid needs at least one risk".into()));
    }
    if steps < 2 {
        return Err(CoreError::Domain("grid needs at least two steps".into()));
    }
    let lo = -upsilon;
    let hi = 1.0 + (n - 1) as f64 * upsilon;
    let mut best = f64::NEG_INFINITY;
    let mut xi = vec![0.0; n];
    fn walk(
        risks: &[f64],
        xi: &mut [f64],
        coord: usize,
        lo: f64,
        hi: f64,
        steps: usize,
        best: &mut f64,
    ) {
        let n = risks.len();
        if coord == n - 1 {
            let rest: f64 = xi[..n - 1].iter().sum();
            let last = 1.0 - rest;
            if last >= lo - 1e-12 {
                let val = xi[..n - 1]
                    .iter()
                    .zip(risks)
                    .map(|(x, r)| x * r)
                    .sum::<f64>()
                    + last * risks[n - 1];
                if val > *best {
                    *best = val;
                }
            }
            return;
        }
        for k in 0..steps {
            xi[coord] = lo + (hi - lo) * k as f64 / (steps - 1) as f64;
            walk(risks, xi, coord + 1, lo, hi, steps, best);
        }
    }
    walk(risks, &mut xi, 0, lo, hi, steps, &mut best);
    Ok(best)
}

/// Suboptimality bound for the running average of the broadcast parameters
/// after `T` rounds:
///
/// ```text
/// B^2 / (2 eta T) + (2 L' / (T^2 mu')) (L' B^2 + (mu' + L') phi^2)
/// ```
pub fn convergence_bound(constants: &TheoryConstants, eta: f64, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(CoreError::Domain("bound needs T >= 1".into()));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(CoreError::Domain(format!(
            "learning rate must be positive and finite, got {eta}"
        )));
    }
    if constants.mu_prime <= 0.0 {
        return Err(CoreError::Domain(format!(
            "bound needs mu_prime > 0, got {}",
            constants.mu_prime
        )));
    }
    let t = t as f64;
    let b2 = constants.b * constants.b;
    let lp = constants.l_prime;
    let head = b2 / (2.0 * eta * t);
    let tail = (2.0 * lp / (t * t * constants.mu_prime))
        * (lp * b2 + (constants.mu_prime + lp) * constants.phi * constants.phi);
    Ok(head + tail)
}

/// Per-client contribution statistics over a run.
#[derive(Clone, Debug, Serialize)]
pub struct ClientContribution {
    pub id: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Rounds where this client's contribution was negative.
    pub negative_rounds: usize,
}

/// Round-by-round contraction bookkeeping for the gap recursion
/// `gap_{t+1} <= (1 - 2 mu sum_i C_i^t) gap_t`.
#[derive(Clone, Debug, Serialize)]
pub struct ContributionReport {
    pub per_client: Vec<ClientContribution>,
    /// One factor `1 - 2 mu sum_i C_i^t` per non-degenerate round.
    pub factors: Vec<f64>,
    /// Product of the factors.
    pub cumulative: f64,
    /// `cumulative` times the initial optimality gap.
    pub implied_gap: f64,
    /// Rounds whose factor exceeds 1 (net-negative contribution).
    pub expanding_rounds: Vec<usize>,
    /// Rounds skipped because the global gradient was degenerate.
    pub degenerate_rounds: Vec<usize>,
}

/// Summarizes logged contributions into per-client statistics and the
/// implied contraction of the optimality gap. Degenerate rounds (NaN
/// contributions) are excluded from the product and listed separately.
pub fn contraction_report(
    records: &[RoundRecord],
    mu: f64,
    initial_gap: f64,
) -> Result<ContributionReport> {
    if records.is_empty() {
        return Err(CoreError::Domain("contraction report needs at least one round".into()));
    }
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(CoreError::Domain(format!(
            "mu must be finite and nonnegative, got {mu}"
        )));
    }
    let mut stats: std::collections::BTreeMap<usize, (f64, f64, f64, usize, usize)> =
        std::collections::BTreeMap::new();
    let mut factors = Vec::with_capacity(records.len());
    let mut expanding = Vec::new();
    let mut degenerate = Vec::new();
    let mut cumulative = 1.0;
    for rec in records {
        let mut sum = 0.0;
        let mut round_ok = true;
        for cr in &rec.per_client {
            if cr.contribution_hat.is_nan() {
                round_ok = false;
                continue;
            }
            let e = stats
                .entry(cr.id)
                .or_insert((0.0, f64::INFINITY, f64::NEG_INFINITY, 0, 0));
            e.0 += cr.contribution_hat;
            e.1 = e.1.min(cr.contribution_hat);
            e.2 = e.2.max(cr.contribution_hat);
            e.3 += 1;
            if cr.contribution_hat < 0.0 {
                e.4 += 1;
            }
            sum += cr.contribution_hat;
        }
        if !round_ok {
            degenerate.push(rec.t);
            continue;
        }
        let factor = 1.0 - 2.0 * mu * sum;
        if factor > 1.0 {
            expanding.push(rec.t);
        }
        cumulative *= factor;
        factors.push(factor);
    }
    let per_client = stats
        .into_iter()
        .map(|(id, (sum, min, max, n, neg))| ClientContribution {
            id,
            mean: if n > 0 { sum / n as f64 } else { f64::NAN },
            min,
            max,
            negative_rounds: neg,
        })
        .collect();
    Ok(ContributionReport {
        per_client,
        factors,
        cumulative,
        implied_gap: cumulative * initial_gap,
        expanding_rounds: expanding,
        degenerate_rounds: degenerate,
    })
}

/// One named bound verification.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub satisfied: bool,
    /// Largest amount by which the bound was exceeded; 0 when satisfied.
    pub max_violation: f64,
}

impl BoundCheck {
    fn from_violation(name: &str, max_violation: f64) -> BoundCheck {
        BoundCheck {
            name: name.to_string(),
            satisfied: max_violation <= 0.0,
            max_violation: max_violation.max(0.0),
        }
    }
}

/// The `theory-check` report document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TheoryReport {
    pub constants: TheoryConstants,
    pub lambda_max: f64,
    pub bound_checks: Vec<BoundCheck>,
}

/// Verifies the stale-gradient ratio bound on a finished trajectory: for
/// every round `t` and lag `tau <= max_tau`, the measured ratio
/// `|grad R(w_{t-tau})| / |grad R(w_t)|` must not exceed
/// [`stale_ratio_bound`].
pub fn stale_ratio_check(
    trajectory: &[ParamVec],
    clients: &[Client],
    spec: &ModelSpec,
    l: f64,
    g: f64,
    max_tau: usize,
) -> Result<BoundCheck> {
    let norms: Vec<f64> = trajectory
        .iter()
        .map(|w| Ok(global_risk_grad(w, spec, clients)?.norm()))
        .collect::<Result<_>>()?;
    let mut worst = f64::NEG_INFINITY;
    for t in 1..norms.len() {
        if norms[t] * norms[t] <= GRAD_FLOOR {
            continue;
        }
        for tau in 1..=max_tau.min(t) {
            let measured = norms[t - tau] / norms[t];
            let bound = stale_ratio_bound(l, g, tau, norms[t])?;
            worst = worst.max(measured - bound);
        }
    }
    Ok(BoundCheck::from_violation("stale_ratio", worst.max(f64::MIN)))
}

/// Verifies the OOD risk bound against the brute-force affine-mixture
/// maximum at each probe point.
pub fn ood_bound_check(
    probes: &[ParamVec],
    clients: &[Client],
    spec: &ModelSpec,
    upsilon: f64,
    grid_steps: usize,
) -> Result<BoundCheck> {
    let mut worst = f64::NEG_INFINITY;
    for w in probes {
        let mut evals = Vec::with_capacity(clients.len());
        let mut risks = Vec::with_capacity(clients.len());
        let zero = ParamVec::zeros(w.len());
        for c in clients {
            let risk_at_w = empirical_risk(w, spec, &c.train)?;
            let grad = risk_grad(w, spec, &c.train)?;
            evals.push(OodClientEval {
                risk_at_w,
                risk_at_zero: empirical_risk(&zero, spec, &c.train)?,
                grad_dot_w: grad.dot(w),
            });
            risks.push(risk_at_w);
        }
        let bound = ood_risk_bound(&evals, upsilon, clients.len())?;
        let brute = affine_grid_max(&risks, upsilon, grid_steps)?;
        worst = worst.max(brute - bound);
    }
    Ok(BoundCheck::from_violation("ood_risk", worst))
}

/// Verifies the convergence bound at each requested horizon: the penalized
/// objective gap of the running parameter average must stay at or below
/// [`convergence_bound`]. The optimum is estimated by a long descent run.
pub fn convergence_check(
    trajectory: &[ParamVec],
    clients: &[Client],
    spec: &ModelSpec,
    lambda: f64,
    eta: f64,
    constants: &TheoryConstants,
    horizons: &[usize],
) -> Result<BoundCheck> {
    if trajectory.is_empty() {
        return Err(CoreError::Domain("convergence check needs a trajectory".into()));
    }
    let obj_grad = |w: &ParamVec| global_objective_grad(w, spec, clients, lambda);
    let (w_star, _) = descend(trajectory.last().unwrap(), 6000, eta, &obj_grad)?;
    let f_star = global_objective(&w_star, spec, clients, lambda)?;
    let mut worst = f64::NEG_INFINITY;
    for &t in horizons {
        if t == 0 || t >= trajectory.len() {
            return Err(CoreError::Domain(format!(
                "horizon {t} outside the recorded trajectory of {} rounds",
                trajectory.len() - 1
            )));
        }
        let mut avg = vec![0.0; trajectory[0].len()];
        for w in &trajectory[1..=t] {
            for (a, v) in avg.iter_mut().zip(w.iter()) {
                *a += v / t as f64;
            }
        }
        let measured = global_objective(&ParamVec::from_raw(avg), spec, clients, lambda)? - f_star;
        let bound = convergence_bound(constants, eta, t)?;
        worst = worst.max(measured - bound);
    }
    Ok(BoundCheck::from_violation("convergence", worst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::Quadratic;
    use crate::model::{Arch, Loss};
    use crate::sim::{Behavior, ClientSpec};
    use proptest::prelude::*;

    fn vecp(v: &[f64]) -> ParamVec {
        ParamVec::new(v.to_vec()).unwrap()
    }

    fn quad_client(id: usize, q: &Quadratic) -> Client {
        Client {
            spec: ClientSpec::new(id, 1, Behavior::Normal).unwrap(),
            train: q.samples(),
            id_test: q.samples(),
        }
    }

    #[test]
    fn contribution_worked_examples() {
        let g = vecp(&[1.0, 0.0]);
        // Identical gradients, full weight: 1 - L/2.
        let c = contribution(&g, &g, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((c - 0.5).abs() < 1e-15);
        // Small client share.
        let c = contribution(&g, &g, 0.1, 1.0, 20.0, 1.0).unwrap();
        assert!((c - 0.0025).abs() < 1e-15);
        // Orthogonal stale gradient is strictly harmful.
        let ortho = vecp(&[0.0, 2.0]);
        let c = contribution(&g, &ortho, 0.5, 1.0, 2.0, 1.0).unwrap();
        assert!((c - (-0.5)).abs() < 1e-15);
        assert!(c < 0.0);
    }

    #[test]
    fn contribution_guards() {
        let tiny = vecp(&[1e-13, 0.0]);
        let g = vecp(&[1.0, 0.0]);
        assert!(matches!(
            contribution(&tiny, &g, 1.0, 1.0, 1.0, 1.0),
            Err(CoreError::DegenerateGradient { .. })
        ));
        let short = vecp(&[1.0]);
        assert!(contribution(&g, &short, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(contribution(&g, &g, 1.0, 2.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn hetero_contribution_worked_example() {
        let c = hetero_contribution_theory(0.5, 0.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((c - (0.25 / (0.5 * 0.5f64.sqrt()) - 0.5)).abs() < 1e-12);
        assert!((c - 0.207_106_781_186_547_5).abs() < 1e-12);
    }

    #[test]
    fn hetero_contribution_reduces_at_origin() {
        let c = hetero_contribution_theory(0.3, 0.0, 0.0, 2.0, 1.5, 1.2, 0.1, 0.25).unwrap();
        let expect = 0.1 * 0.25 * (2.0 - 0.5 * 1.2 * 1.5 * 1.5);
        assert!((c - expect).abs() < 1e-12);
        assert!(matches!(
            hetero_contribution_theory(1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0),
            Err(CoreError::Domain(_))
        ));
    }

    #[test]
    fn stale_ratio_bound_examples() {
        assert_eq!(stale_ratio_bound(1.0, 2.0, 0, 0.5).unwrap(), 1.0);
        assert_eq!(stale_ratio_bound(1.0, 2.0, 3, 1.0).unwrap(), 7.0);
        let b1 = stale_ratio_bound(0.5, 1.0, 2, 0.3).unwrap();
        let b2 = stale_ratio_bound(0.5, 1.0, 3, 0.3).unwrap();
        assert!(b2 > b1);
        assert!(stale_ratio_bound(1.0, 1.0, 1, 0.0).is_err());
    }

    #[test]
    fn constants_recover_quadratic_eigenvalues() {
        let q = Quadratic {
            curvatures: vec![1.0, 4.0],
            center: vec![0.3, -0.2],
        };
        let clients = vec![quad_client(0, &q)];
        let spec = ModelSpec::new(Arch::Linear { input_dim: 2 }, Loss::SquaredError).unwrap();
        let mut cfg = FedConfig::new(spec, 0.2, 10);
        cfg.seed = 5;
        let trajectory = vec![vecp(&[0.0, 0.0]), vecp(&[0.1, 0.05]), vecp(&[0.2, -0.1])];
        let consts = estimate_constants(&trajectory, &clients, &cfg).unwrap();
        assert!((consts.l - 4.0).abs() < 1e-6, "L = {}", consts.l);
        assert!((consts.mu - 1.0).abs() < 1e-6, "mu = {}", consts.mu);
        assert!(consts.rho <= 1e-8, "rho = {}", consts.rho);
        assert!((consts.mu_prime - consts.mu / 2.0).abs() < 1e-12);
        // theta = R(0) - R(w*) for the single client.
        assert!((consts.theta[0] - q.gap_at_zero()).abs() < 1e-8);
        consts.validate().unwrap();
    }

    #[test]
    fn gradient_sup_grows_with_trajectory() {
        let q = Quadratic {
            curvatures: vec![2.0],
            center: vec![1.0],
        };
        let clients = vec![quad_client(0, &q)];
        let spec = ModelSpec::new(Arch::Linear { input_dim: 1 }, Loss::SquaredError).unwrap();
        let cfg = FedConfig::new(spec, 0.1, 10);
        let short = vec![vecp(&[0.5])];
        let long = vec![vecp(&[0.5]), vecp(&[-1.0])];
        let g_short = estimate_constants(&short, &clients, &cfg).unwrap().g;
        let g_long = estimate_constants(&long, &clients, &cfg).unwrap().g;
        assert!(g_long >= g_short);
    }

    #[test]
    fn ood_bound_reductions() {
        // Single client at w = 0: both sup terms vanish.
        let evals = [OodClientEval {
            risk_at_w: 0.7,
            risk_at_zero: 0.7,
            grad_dot_w: 0.0,
        }];
        let b = ood_risk_bound(&evals, 0.1, 1).unwrap();
        assert!((b - 0.7).abs() < 1e-15);

        // Single client, general w.
        let evals = [OodClientEval {
            risk_at_w: 0.4,
            risk_at_zero: 0.9,
            grad_dot_w: 0.2,
        }];
        let b = ood_risk_bound(&evals, 0.25, 1).unwrap();
        assert!((b - (0.4 + 2.0 * 1.25 * 0.2)).abs() < 1e-15);

        assert!(ood_risk_bound(&[], 0.1, 1).is_err());
        assert!(ood_risk_bound(&evals, -0.1, 1).is_err());
    }

    #[test]
    fn affine_grid_respects_constraints() {
        // Two risks: max over xi in [-u, 1+u] of xi r0 + (1 - xi) r1 at the
        // boundary xi = 1 + u when r0 > r1.
        let m = affine_grid_max(&[2.0, 1.0], 0.1, 12).unwrap();
        assert!((m - (1.1 * 2.0 - 0.1)).abs() < 1e-12);
        // Uniform risks: any mixture gives the same value.
        let m = affine_grid_max(&[1.5, 1.5, 1.5], 0.2, 6).unwrap();
        assert!((m - 1.5).abs() < 1e-12);
    }

    #[test]
    fn ood_bound_dominates_brute_force_on_quadratics() {
        let qs = [
            Quadratic {
                curvatures: vec![1.0, 1.0],
                center: vec![0.2, 0.1],
            },
            Quadratic {
                curvatures: vec![1.0, 1.0],
                center: vec![-0.15, 0.25],
            },
            Quadratic {
                curvatures: vec![1.0, 1.0],
                center: vec![0.0, -0.2],
            },
        ];
        let clients: Vec<Client> = qs
            .iter()
            .enumerate()
            .map(|(i, q)| quad_client(i, q))
            .collect();
        let spec = ModelSpec::new(Arch::Linear { input_dim: 2 }, Loss::SquaredError).unwrap();
        let mut rng = substream(11, "ood-smoke");
        let probes: Vec<ParamVec> = (0..10)
            .map(|_| {
                let dir = unit_random(2, &mut rng);
                dir.scale(1.0 + rand::Rng::gen::<f64>(&mut rng))
            })
            .collect();
        let check = ood_bound_check(&probes, &clients, &spec, 0.1, 11).unwrap();
        assert!(check.satisfied, "violation {}", check.max_violation);
    }

    #[test]
    fn convergence_bound_examples() {
        let consts = TheoryConstants {
            l: 1.0,
            mu: 1.0,
            g: 1.0,
            b: 1.0,
            beta: 1.0,
            rho: 0.0,
            phi: 1.0,
            theta: vec![],
            l_prime: 1.0,
            mu_prime: 0.5,
            lambda_max: 1.0,
            warnings: vec![],
        };
        let b = convergence_bound(&consts, 0.1, 10).unwrap();
        assert!((b - 0.6).abs() < 1e-12);

        let mut no_phi = consts.clone();
        no_phi.phi = 0.0;
        let b = convergence_bound(&no_phi, 0.1, 10).unwrap();
        let expect = 1.0 / (2.0 * 0.1 * 10.0) + 2.0 * 1.0 * 1.0 / (100.0 * 0.5);
        assert!((b - expect).abs() < 1e-12);

        let b1 = convergence_bound(&consts, 0.1, 100).unwrap();
        let b2 = convergence_bound(&consts, 0.1, 10_000).unwrap();
        assert!(b2 < b1 && b2 < 1e-3);

        let mut bad = consts;
        bad.mu_prime = 0.0;
        assert!(matches!(
            convergence_bound(&bad, 0.1, 10),
            Err(CoreError::Domain(_))
        ));
    }

    fn record_with(t: usize, contributions: &[f64]) -> RoundRecord {
        RoundRecord {
            t,
            global_loss: 0.0,
            global_penalty_mean: 0.0,
            per_client: contributions
                .iter()
                .enumerate()
                .map(|(id, &c)| crate::sim::ClientRound {
                    id,
                    participated: true,
                    staleness: 0,
                    contribution_hat: c,
                    local_loss: 0.0,
                    local_penalty: 0.0,
                })
                .collect(),
            id_acc: None,
            ood_acc: None,
        }
    }

    #[test]
    fn contraction_report_examples() {
        let recs = vec![record_with(1, &[0.0, 0.0]), record_with(2, &[0.0, 0.0])];
        let rep = contraction_report(&recs, 1.0, 0.8).unwrap();
        assert_eq!(rep.factors, vec![1.0, 1.0]);
        assert!((rep.implied_gap - 0.8).abs() < 1e-15);
        assert!(rep.expanding_rounds.is_empty());

        let recs = vec![record_with(1, &[0.06, 0.04])];
        let rep = contraction_report(&recs, 1.0, 1.0).unwrap();
        assert!((rep.factors[0] - 0.8).abs() < 1e-12);

        let recs = vec![record_with(1, &[-0.1, 0.05]), record_with(2, &[f64::NAN, 0.0])];
        let rep = contraction_report(&recs, 1.0, 1.0).unwrap();
        assert_eq!(rep.expanding_rounds, vec![1]);
        assert_eq!(rep.degenerate_rounds, vec![2]);
        assert_eq!(rep.factors.len(), 1);
        assert_eq!(rep.per_client[0].negative_rounds, 1);

        assert!(contraction_report(&[], 1.0, 1.0).is_err());
    }

    #[test]
    fn theory_report_serializes_stably() {
        let report = TheoryReport {
            constants: TheoryConstants {
                l: 2.0,
                mu: 0.5,
                g: 1.0,
                b: 1.0,
                beta: 1.0,
                rho: 0.0,
                phi: 0.25,
                theta: vec![0.1, 0.2],
                l_prime: 2.1,
                mu_prime: 0.25,
                lambda_max: 0.05,
                warnings: vec![],
            },
            lambda_max: 0.05,
            bound_checks: vec![BoundCheck {
                name: "stale_ratio".into(),
                satisfied: true,
                max_violation: 0.0,
            }],
        };
        let a = serde_json::to_string_pretty(&report).unwrap();
        let b = serde_json::to_string_pretty(&report).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"L\": 2.0"));
        assert!(a.contains("\"bound_checks\""));
        let back: TheoryReport = serde_json::from_str(&a).unwrap();
        assert_eq!(back.constants.theta, vec![0.1, 0.2]);
    }

    proptest! {
        #[test]
        fn hetero_contribution_monotone_in_we_norm(
            kappa in 0.05f64..0.95,
            we_a in 0.0f64..3.0,
            gap in 0.0f64..3.0,
        ) {
            let c_near = hetero_contribution_theory(kappa, 0.0, we_a, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
            let c_far = hetero_contribution_theory(kappa, 0.0, we_a + gap, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
            prop_assert!(c_far <= c_near + 1e-12);
        }

        #[test]
        fn stale_bound_monotone_in_tau(
            l in 0.0f64..5.0,
            g in 0.0f64..5.0,
            norm in 0.01f64..5.0,
            tau in 0usize..20,
        ) {
            let b1 = stale_ratio_bound(l, g, tau, norm).unwrap();
            let b2 = stale_ratio_bound(l, g, tau + 1, norm).unwrap();
            prop_assert!(b2 >= b1);
        }
    }
}
