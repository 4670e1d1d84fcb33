//! Latent-variable models of the pooled DML residuals.
//!
//! Two noise structures are supported, both fitted by EM on `(R, V)`:
//!
//! * **Outcome latent**: `U = Z + W_u` with `Z + beta ~ Exponential(mean beta)`
//!   and `W_u ~ N(0, sigma_u^2)`; `V ~ N(0, sigma_v^2)` is unaffected.
//! * **Confounder latent**: `U = aZ + W_u`, `V = bZ + W_v` with
//!   `Z + q ~ Bernoulli(q)`.
//!
//! After fitting, the outcome residual is adjusted by the posterior mean of the
//! latent contribution and the causal effect solves the score equation
//! `sum (R_z - theta V) V = 0`.
//!
//! The non-closed-form parameters (`beta`, `q`) take one natural-gradient
//! step per M-step, preconditioned by the Fisher information of the latent
//! distribution family over the `N` samples and safeguarded by backtracking on
//! the EM surrogate, so every iteration is a generalized EM step and the
//! marginal likelihood never decreases.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dml::{gaussian_residual_loglik, pooled_theta, ratio_estimate, ResidualSet};
use crate::error::{Error, Result};
use crate::numerics::{
    emg_log_density_unchecked, normal_log_pdf, truncated_normal_moments, RngStream, LN_SQRT_2PI,
};

/// Lower bound for `beta`.
pub const BETA_FLOOR: f64 = 1e-6;
/// Lower bound for the Gaussian noise scales.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Bounds for the Bernoulli probability.
pub const Q_MIN: f64 = 1e-4;
pub const Q_MAX: f64 = 1.0 - 1e-4;
/// Slack allowed when checking that a log-likelihood trace never decreases.
pub const ASCENT_SLACK: f64 = 1e-9;

const MAX_HALVINGS: usize = 20;
const Q_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLatentParams {
    pub theta: f64,
    pub beta: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
}

impl OutcomeLatentParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.theta.is_finite()
            && self.beta > 0.0
            && self.beta.is_finite()
            && self.sigma_u > 0.0
            && self.sigma_u.is_finite()
            && self.sigma_v > 0.0
            && self.sigma_v.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "outcome latent parameters out of domain: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfounderLatentParams {
    pub theta: f64,
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
}

impl ConfounderLatentParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.theta.is_finite()
            && self.a.is_finite()
            && self.b.is_finite()
            && self.q > 0.0
            && self.q < 1.0
            && self.sigma_u > 0.0
            && self.sigma_u.is_finite()
            && self.sigma_v > 0.0
            && self.sigma_v.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "confounder latent parameters out of domain: {self:?}"
            )))
        }
    }

    /// The model is invariant under `(a, b, q) -> (-a, -b, 1 - q)`; this picks
    /// the representative with `b >= 0`.
    pub fn canonical(self) -> Self {
        if self.b < 0.0 {
            ConfounderLatentParams {
                a: -self.a,
                b: -self.b,
                q: 1.0 - self.q,
                ..self
            }
        } else {
            self
        }
    }
}

/// Parameters of the Gaussian baseline used by ordinary DML.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrdinaryParams {
    pub theta: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelParams {
    Ordinary(OrdinaryParams),
    OutcomeLatent(OutcomeLatentParams),
    ConfounderLatent(ConfounderLatentParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ordinary,
    OutcomeLatent,
    ConfounderLatent,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::Ordinary,
        ModelKind::OutcomeLatent,
        ModelKind::ConfounderLatent,
    ];

    /// Free parameters counted by BIC.
    pub fn n_params(self) -> usize {
        match self {
            ModelKind::Ordinary => 3,
            ModelKind::OutcomeLatent => 4,
            ModelKind::ConfounderLatent => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ordinary => "ordinary",
            ModelKind::OutcomeLatent => "outcome_latent",
            ModelKind::ConfounderLatent => "confounder_latent",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::NotFound {
                kind: "model",
                name: s.to_string(),
                valid: ModelKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: ModelParams,
    /// Marginal log-likelihood, starting at the initial parameters.
    pub loglik_trace: Vec<f64>,
    /// Traces of the restarts that were not selected.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub other_restart_traces: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub bic: f64,
    pub theta_final: f64,
}

impl FitReport {
    pub fn kind(&self) -> ModelKind {
        match self.params {
            ModelParams::Ordinary(_) => ModelKind::Ordinary,
            ModelParams::OutcomeLatent(_) => ModelKind::OutcomeLatent,
            ModelParams::ConfounderLatent(_) => ModelKind::ConfounderLatent,
        }
    }

    /// Number of iterations, over every restart, at which the marginal
    /// log-likelihood dropped by more than `slack`.
    pub fn ascent_violations(&self, slack: f64) -> usize {
        std::iter::once(&self.loglik_trace)
            .chain(self.other_restart_traces.iter())
            .map(|t| t.windows(2).filter(|w| w[1] < w[0] - slack).count())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Stop once the marginal log-likelihood changes by less than this.
    pub tol: f64,
    pub max_iter: usize,
    /// Base natural-gradient step for `beta` and `q`.
    pub natural_step: f64,
    /// Random restarts of the confounder model.
    pub restarts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tol: 1e-8,
            max_iter: 500,
            natural_step: 1.0,
            restarts: 5,
        }
    }
}

/// `-2 loglik + k ln n`
pub fn bic(loglik: f64, k: usize, n: usize) -> f64 {
    -2.0 * loglik + k as f64 * (n as f64).ln()
}

/// Solves `sum (R_z - theta V) V = 0` for `theta`.
pub fn score_theta(r_z: &[f64], v_hat: &[f64]) -> Result<f64> {
    if r_z.len() != v_hat.len() {
        return Err(Error::Shape {
            expected: v_hat.len(),
            found: r_z.len(),
        });
    }
    ratio_estimate(r_z, v_hat)
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    (s / n.max(1) as f64).sqrt()
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn check_residuals(res: &ResidualSet) -> Result<()> {
    if res.len() < 3 {
        return Err(Error::DegenerateData(format!(
            "need at least 3 residual pairs, got {}",
            res.len()
        )));
    }
    if !res.v_hat.iter().any(|&v| v != 0.0) {
        return Err(Error::DegenerateTreatment);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Outcome latent model
// ---------------------------------------------------------------------------

/// Posterior moments `E[Z' | R, V]` and `E[Z'^2 | R, V]` of the unshifted
/// exponential latent `Z' = Z + beta`, which is `N(m_i, sigma_u^2)` truncated
/// to `[0, inf)` with `m_i = R - theta V + beta - sigma_u^2 / beta`.
pub fn outcome_e_step(res: &ResidualSet, p: &OutcomeLatentParams) -> Result<(Vec<f64>, Vec<f64>)> {
    p.validate()?;
    let shift = p.beta - p.sigma_u * p.sigma_u / p.beta;
    let mut z1 = Vec::with_capacity(res.len());
    let mut z2 = Vec::with_capacity(res.len());
    for (r, v) in res.pairs() {
        let t = truncated_normal_moments(r - p.theta * v + shift, p.sigma_u)?;
        z1.push(t.mean);
        z2.push(t.second_moment);
    }
    Ok((z1, z2))
}

/// Expected complete-data log-likelihood of the outcome model given the
/// posterior moments `(z1, z2)`.
pub fn outcome_q_value(res: &ResidualSet, z1: &[f64], z2: &[f64], p: &OutcomeLatentParams) -> f64 {
    let nf = res.len() as f64;
    let s2 = p.sigma_u * p.sigma_u;
    let mut acc = 0.0;
    for (i, (r, v)) in res.pairs().enumerate() {
        let e = r - p.theta * v + p.beta;
        acc += -z1[i] / p.beta - (e * e - 2.0 * e * z1[i] + z2[i]) / (2.0 * s2);
    }
    let v_part: f64 = res.v_hat.iter().map(|&v| normal_log_pdf(v, 0.0, p.sigma_v)).sum();
    acc - nf * (p.beta.ln() + p.sigma_u.ln() + LN_SQRT_2PI) + v_part
}

/// `dQ/dbeta` summed over samples.
pub fn outcome_q_beta_gradient(res: &ResidualSet, z1: &[f64], p: &OutcomeLatentParams) -> f64 {
    let s2 = p.sigma_u * p.sigma_u;
    let b2 = p.beta * p.beta;
    res.pairs()
        .zip(z1)
        .map(|((r, v), &m1)| m1 / b2 - 1.0 / p.beta - (r - p.theta * v - m1 + p.beta) / s2)
        .sum()
}

/// One generalized M-step: closed-form `theta` and `sigma_u`, then one
/// backtracked natural-gradient step on `beta`.
pub fn outcome_m_step(
    res: &ResidualSet,
    z1: &[f64],
    z2: &[f64],
    p: &OutcomeLatentParams,
    step: f64,
) -> Result<OutcomeLatentParams> {
    if z1.len() != res.len() || z2.len() != res.len() {
        return Err(Error::Shape {
            expected: res.len(),
            found: z1.len().min(z2.len()),
        });
    }
    let nf = res.len() as f64;
    let beta = p.beta;
    let vv: f64 = res.v_hat.iter().map(|v| v * v).sum();
    if !(vv > 0.0) {
        return Err(Error::DegenerateTreatment);
    }
    let vr: f64 = res.pairs().zip(z1).map(|((r, v), &m1)| v * (r - m1 + beta)).sum();
    let theta = vr / vv;

    let s2 = res
        .pairs()
        .enumerate()
        .map(|(i, (r, v))| {
            let e = r - theta * v + beta;
            e * e - 2.0 * e * z1[i] + z2[i]
        })
        .sum::<f64>()
        / nf;
    let sigma_u = s2.max(0.0).sqrt().max(SIGMA_FLOOR);
    let sigma_v = rms(res.v_hat.iter().copied()).max(SIGMA_FLOOR);

    let mut next = OutcomeLatentParams {
        theta,
        beta,
        sigma_u,
        sigma_v,
    };
    let direction = beta * beta * outcome_q_beta_gradient(res, z1, &next) / nf;
    let q0 = outcome_q_value(res, z1, z2, &next);
    let mut t = step;
    for _ in 0..=MAX_HALVINGS {
        let candidate = OutcomeLatentParams {
            beta: (beta + t * direction).max(BETA_FLOOR),
            ..next
        };
        let qc = outcome_q_value(res, z1, z2, &candidate);
        if qc.is_finite() && qc >= q0 {
            next = candidate;
            break;
        }
        t *= 0.5;
    }
    Ok(next)
}

/// Marginal log-likelihood of `(R, V)` under the outcome model.
pub fn outcome_marginal_loglik(res: &ResidualSet, p: &OutcomeLatentParams) -> f64 {
    let rate = 1.0 / p.beta;
    res.pairs()
        .map(|(r, v)| {
            emg_log_density_unchecked(r, p.theta * v - p.beta, p.sigma_u, rate)
                + normal_log_pdf(v, 0.0, p.sigma_v)
        })
        .sum()
}

/// `R - E[Z | R, V]` where `E[Z | R, V] = E[Z' | R, V] - beta`.
pub fn outcome_adjust(res: &ResidualSet, p: &OutcomeLatentParams) -> Result<Vec<f64>> {
    let (z1, _) = outcome_e_step(res, p)?;
    Ok(res
        .r_hat
        .iter()
        .zip(&z1)
        .map(|(r, m1)| r - (m1 - p.beta))
        .collect())
}

/// Starting point used when no explicit initialization is given.
pub fn outcome_default_init(res: &ResidualSet) -> Result<OutcomeLatentParams> {
    let theta = pooled_theta(res)?;
    let spread = rms(res.pairs().map(|(r, v)| r - theta * v)).max(SIGMA_FLOOR);
    Ok(OutcomeLatentParams {
        theta,
        beta: spread,
        sigma_u: spread,
        sigma_v: rms(res.v_hat.iter().copied()).max(SIGMA_FLOOR),
    })
}

const MAX_RELAX: f64 = 64.0;

fn extrapolate_outcome(from: &OutcomeLatentParams, to: &OutcomeLatentParams, eta: f64) -> OutcomeLatentParams {
    let lerp = |a: f64, b: f64| a + eta * (b - a);
    OutcomeLatentParams {
        theta: lerp(from.theta, to.theta),
        beta: lerp(from.beta, to.beta).max(BETA_FLOOR),
        sigma_u: lerp(from.sigma_u, to.sigma_u).max(SIGMA_FLOOR),
        sigma_v: to.sigma_v,
    }
}

/// Conditional maximisation of the marginal likelihood along
/// `beta^2 + sigma_u^2 = const`, the direction along which EM is slowest.
/// Returns a point only if it strictly improves on `current_ll`.
fn outcome_ridge_search(
    res: &ResidualSet,
    p: &OutcomeLatentParams,
    current_ll: f64,
) -> Option<(OutcomeLatentParams, f64)> {
    let total = (p.beta * p.beta + p.sigma_u * p.sigma_u).sqrt();
    let at = |frac: f64| {
        let beta = (frac * total).max(BETA_FLOOR);
        let sigma_u = (total * total - beta * beta).max(0.0).sqrt().max(SIGMA_FLOOR);
        let q = OutcomeLatentParams { beta, sigma_u, ..*p };
        (q, outcome_marginal_loglik(res, &q))
    };
    const GRID: usize = 16;
    let hi = 0.995;
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 0..=GRID {
        let ll = at(hi * i as f64 / GRID as f64).1;
        if ll > best.1 {
            best = (i, ll);
        }
    }
    let step = hi / GRID as f64;
    let mut lo = (best.0 as f64 - 1.0).max(0.0) * step;
    let mut up = ((best.0 + 1) as f64 * step).min(hi);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..40 {
        let m1 = up - g * (up - lo);
        let m2 = lo + g * (up - lo);
        if at(m1).1 >= at(m2).1 {
            up = m2;
        } else {
            lo = m1;
        }
    }
    let mut cand = at(0.5 * (lo + up));
    let grid_best = at(best.0 as f64 * step);
    if grid_best.1 > cand.1 {
        cand = grid_best;
    }
    (cand.1.is_finite() && cand.1 > current_ll).then_some(cand)
}

pub fn fit_outcome_em(
    res: &ResidualSet,
    init: Option<OutcomeLatentParams>,
    cfg: &EmConfig,
) -> Result<FitReport> {
    check_residuals(res)?;
    let mut p = match init {
        Some(p) => p,
        None => outcome_default_init(res)?,
    };
    p.validate()?;
    let mut ll = outcome_marginal_loglik(res, &p);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut relax = 2.0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let previous = p;
        let (z1, z2) = outcome_e_step(res, &p)?;
        let stepped = outcome_m_step(res, &z1, &z2, &p, cfg.natural_step)?;
        let mut next = outcome_marginal_loglik(res, &stepped);
        // Over-relaxation: near beta -> 0 plain EM crawls sublinearly. An
        // extrapolated point is only kept when it beats the plain step.
        let trial = extrapolate_outcome(&p, &stepped, relax);
        let trial_ll = outcome_marginal_loglik(res, &trial);
        if trial_ll.is_finite() && trial_ll >= next {
            p = trial;
            next = trial_ll;
            relax = (relax * 2.0).min(MAX_RELAX);
        } else {
            p = stepped;
            relax = 2.0;
        }
        if let Some((q, q_ll)) = outcome_ridge_search(res, &p, next) {
            p = q;
            next = q_ll;
        }
        if next < ll {
            // Posterior moments deep in the Mills-ratio tail (beta near its
            // floor) carry enough rounding to undo a sub-1e-6 gain; at that
            // point the fit is numerically stationary.
            p = previous;
            next = ll;
        }
        trace.push(next);
        let change = (next - ll).abs();
        ll = next;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let r_z = outcome_adjust(res, &p)?;
    let theta_final = score_theta(&r_z, &res.v_hat)?;
    Ok(FitReport {
        params: ModelParams::OutcomeLatent(p),
        loglik_trace: trace,
        other_restart_traces: Vec::new(),
        converged,
        iterations,
        loglik: ll,
        bic: bic(ll, ModelKind::OutcomeLatent.n_params(), res.len()),
        theta_final,
    })
}

// ---------------------------------------------------------------------------
// Confounder latent model
// ---------------------------------------------------------------------------

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-odds of `Z = 1 - q` against `Z = -q` for one residual pair.
fn confounder_log_odds(r: f64, v: f64, p: &ConfounderLatentParams) -> f64 {
    let two_q_minus_1 = 2.0 * p.q - 1.0;
    let ru = r - p.theta * v;
    (p.q / (1.0 - p.q)).ln()
        + (two_q_minus_1 * p.a * p.a + 2.0 * p.a * ru) / (2.0 * p.sigma_u * p.sigma_u)
        + (two_q_minus_1 * p.b * p.b + 2.0 * p.b * v) / (2.0 * p.sigma_v * p.sigma_v)
}

/// Posterior probability `P(Z_i = 1 - q | R_i, V_i)` for every sample.
pub fn confounder_posterior(res: &ResidualSet, p: &ConfounderLatentParams) -> Result<Vec<f64>> {
    p.validate()?;
    Ok(res
        .pairs()
        .map(|(r, v)| logistic(confounder_log_odds(r, v, p)))
        .collect())
}

/// Expected complete-data log-likelihood with posterior weights `pi` held
/// fixed. Valid for any `q`, since the latent support moves with `q`.
pub fn confounder_q_value(res: &ResidualSet, pi: &[f64], p: &ConfounderLatentParams) -> f64 {
    let nf = res.len() as f64;
    let (lq, l1q) = (p.q.ln(), (1.0 - p.q).ln());
    let (hi, lo) = (1.0 - p.q, -p.q);
    let (su2, sv2) = (p.sigma_u * p.sigma_u, p.sigma_v * p.sigma_v);
    let mut acc = 0.0;
    for (i, (r, v)) in res.pairs().enumerate() {
        let w = pi[i];
        let ru = r - p.theta * v;
        let ev = w * (v - p.b * hi).powi(2) + (1.0 - w) * (v - p.b * lo).powi(2);
        let eu = w * (ru - p.a * hi).powi(2) + (1.0 - w) * (ru - p.a * lo).powi(2);
        acc += w * lq + (1.0 - w) * l1q - ev / (2.0 * sv2) - eu / (2.0 * su2);
    }
    acc - nf * (p.sigma_u.ln() + p.sigma_v.ln() + 2.0 * LN_SQRT_2PI)
}

/// One generalized M-step: closed-form `(theta, a, b, sigma_u, sigma_v)` at
/// the current `q`, then one backtracked natural-gradient step on `q` using a
/// central finite-difference gradient of the surrogate.
pub fn confounder_m_step(
    res: &ResidualSet,
    pi: &[f64],
    p: &ConfounderLatentParams,
    step: f64,
) -> Result<ConfounderLatentParams> {
    if pi.len() != res.len() {
        return Err(Error::Shape {
            expected: res.len(),
            found: pi.len(),
        });
    }
    let nf = res.len() as f64;
    let q = p.q;
    let (mut s_vv, mut s_vz, mut s_zz, mut s_vr, mut s_rz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (r, v)) in res.pairs().enumerate() {
        let z = pi[i] - q;
        let z2 = pi[i] * (1.0 - q).powi(2) + (1.0 - pi[i]) * q * q;
        s_vv += v * v;
        s_vz += v * z;
        s_zz += z2;
        s_vr += v * r;
        s_rz += r * z;
    }
    if !(s_vv > 0.0) {
        return Err(Error::DegenerateTreatment);
    }
    let b = s_vz / s_zz;
    let (theta, a) = crate::numerics::solve_2x2(s_vv, s_vz, s_vz, s_zz, s_vr, s_rz)?;

    let (mut ev, mut eu) = (0.0, 0.0);
    for (i, (r, v)) in res.pairs().enumerate() {
        let z = pi[i] - q;
        let z2 = pi[i] * (1.0 - q).powi(2) + (1.0 - pi[i]) * q * q;
        let ru = r - theta * v;
        ev += v * v - 2.0 * b * v * z + b * b * z2;
        eu += ru * ru - 2.0 * a * ru * z + a * a * z2;
    }
    let sigma_v = (ev / nf).max(0.0).sqrt().max(SIGMA_FLOOR);
    let sigma_u = (eu / nf).max(0.0).sqrt().max(SIGMA_FLOOR);

    let mut next = ConfounderLatentParams {
        theta,
        a,
        b,
        q,
        sigma_u,
        sigma_v,
    };
    let grad = confounder_q_gradient_fd(res, pi, &next);
    let direction = q * (1.0 - q) * grad / nf;
    let q0 = confounder_q_value(res, pi, &next);
    let mut t = step;
    for _ in 0..=MAX_HALVINGS {
        let candidate = ConfounderLatentParams {
            q: (q + t * direction).clamp(Q_MIN, Q_MAX),
            ..next
        };
        let qc = confounder_q_value(res, pi, &candidate);
        if qc.is_finite() && qc >= q0 {
            next = candidate;
            break;
        }
        t *= 0.5;
    }
    Ok(next)
}

/// Central finite difference of the surrogate in `q` (summed over samples).
pub fn confounder_q_gradient_fd(res: &ResidualSet, pi: &[f64], p: &ConfounderLatentParams) -> f64 {
    let h = Q_FD_STEP.min(0.5 * p.q).min(0.5 * (1.0 - p.q));
    let plus = ConfounderLatentParams { q: p.q + h, ..*p };
    let minus = ConfounderLatentParams { q: p.q - h, ..*p };
    (confounder_q_value(res, pi, &plus) - confounder_q_value(res, pi, &minus)) / (2.0 * h)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Marginal log-likelihood of `(R, V)` under the two-component mixture.
pub fn confounder_marginal_loglik(res: &ResidualSet, p: &ConfounderLatentParams) -> f64 {
    let (hi, lo) = (1.0 - p.q, -p.q);
    let (lq, l1q) = (p.q.ln(), (1.0 - p.q).ln());
    res.pairs()
        .map(|(r, v)| {
            let up = lq
                + normal_log_pdf(v, p.b * hi, p.sigma_v)
                + normal_log_pdf(r, p.theta * v + p.a * hi, p.sigma_u);
            let down = l1q
                + normal_log_pdf(v, p.b * lo, p.sigma_v)
                + normal_log_pdf(r, p.theta * v + p.a * lo, p.sigma_u);
            log_sum_exp(up, down)
        })
        .sum()
}

/// `R - a (pi - q)`.
pub fn confounder_adjust(res: &ResidualSet, p: &ConfounderLatentParams) -> Result<Vec<f64>> {
    let pi = confounder_posterior(res, p)?;
    Ok(res
        .r_hat
        .iter()
        .zip(&pi)
        .map(|(r, w)| r - p.a * (w - p.q))
        .collect())
}

struct EmRun<P> {
    params: P,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

fn run_confounder_em(
    res: &ResidualSet,
    init: ConfounderLatentParams,
    cfg: &EmConfig,
) -> Result<EmRun<ConfounderLatentParams>> {
    init.validate()?;
    let mut p = init;
    let mut ll = confounder_marginal_loglik(res, &p);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let pi = confounder_posterior(res, &p)?;
        p = confounder_m_step(res, &pi, &p, cfg.natural_step)?;
        let next = confounder_marginal_loglik(res, &p);
        trace.push(next);
        let change = (next - ll).abs();
        ll = next;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        params: p,
        trace,
        converged,
        iterations,
    })
}

/// Initial point of restart `index`: `theta` from ordinary DML, `q = 1/2`,
/// loadings drawn around zero with the residual spreads as scale.
pub fn confounder_init(res: &ResidualSet, stream: &mut RngStream) -> Result<ConfounderLatentParams> {
    let theta = pooled_theta(res)?;
    let ru: Vec<f64> = res.pairs().map(|(r, v)| r - theta * v).collect();
    let su = std_dev(&ru).max(SIGMA_FLOOR);
    let sv = std_dev(&res.v_hat).max(SIGMA_FLOOR);
    Ok(ConfounderLatentParams {
        theta,
        a: su * stream.standard_normal(),
        b: sv * stream.standard_normal(),
        q: 0.5,
        sigma_u: su,
        sigma_v: sv,
    })
}

/// EM from `cfg.restarts` random starts; keeps the converged restart with the
/// highest final marginal log-likelihood (or the best overall when none
/// converged). Restart `i` draws from `stream.substream(i)`.
pub fn fit_confounder_em(res: &ResidualSet, cfg: &EmConfig, stream: &RngStream) -> Result<FitReport> {
    check_residuals(res)?;
    let restarts = cfg.restarts.max(1);
    let mut runs = Vec::with_capacity(restarts);
    let mut last_err = None;
    for i in 0..restarts {
        let mut s = stream.substream(i as u64);
        let init = confounder_init(res, &mut s)?;
        match run_confounder_em(res, init, cfg) {
            Ok(run) => runs.push(run),
            Err(e) => last_err = Some(e),
        }
    }
    if runs.is_empty() {
        return Err(last_err.unwrap_or(Error::DegenerateData("no EM restart ran".into())));
    }
    let any_converged = runs.iter().any(|r| r.converged);
    let best = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.converged || !any_converged)
        .max_by(|(_, x), (_, y)| {
            let lx = *x.trace.last().unwrap();
            let ly = *y.trace.last().unwrap();
            lx.total_cmp(&ly)
        })
        .map(|(i, _)| i)
        .expect("at least one run");
    let chosen = runs.swap_remove(best);
    let others = runs.into_iter().map(|r| r.trace).collect();

    let p = chosen.params.canonical();
    let ll = *chosen.trace.last().unwrap();
    let r_z = confounder_adjust(res, &p)?;
    let theta_final = score_theta(&r_z, &res.v_hat)?;
    Ok(FitReport {
        params: ModelParams::ConfounderLatent(p),
        loglik_trace: chosen.trace,
        other_restart_traces: others,
        converged: chosen.converged,
        iterations: chosen.iterations,
        loglik: ll,
        bic: bic(ll, ModelKind::ConfounderLatent.n_params(), res.len()),
        theta_final,
    })
}

/// Ordinary DML packaged as a [`FitReport`] so it can compete under BIC.
pub fn fit_ordinary(res: &ResidualSet) -> Result<FitReport> {
    let theta = pooled_theta(res)?;
    let g = gaussian_residual_loglik(res, theta)?;
    Ok(FitReport {
        params: ModelParams::Ordinary(OrdinaryParams {
            theta,
            sigma_u: g.sigma_u,
            sigma_v: g.sigma_v,
        }),
        loglik_trace: vec![g.loglik],
        other_restart_traces: Vec::new(),
        converged: true,
        iterations: 0,
        loglik: g.loglik,
        bic: bic(g.loglik, ModelKind::Ordinary.n_params(), res.len()),
        theta_final: theta,
    })
}

pub fn fit_model(res: &ResidualSet, kind: ModelKind, cfg: &EmConfig, stream: &RngStream) -> Result<FitReport> {
    match kind {
        ModelKind::Ordinary => fit_ordinary(res),
        ModelKind::OutcomeLatent => fit_outcome_em(res, None, cfg),
        ModelKind::ConfounderLatent => fit_confounder_em(res, cfg, stream),
    }
}

/// Candidate set used for BIC selection when none is given.
pub const DEFAULT_CANDIDATES: [ModelKind; 2] = [ModelKind::OutcomeLatent, ModelKind::ConfounderLatent];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSelectionResult {
    pub chosen: ModelKind,
    pub candidates: BTreeMap<ModelKind, FitReport>,
    /// Candidates that could not be fitted, with the reason.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<ModelKind, String>,
    pub theta: f64,
}

/// Fits every candidate and keeps the one with the lowest BIC. BIC values
/// within 1e-9 count as tied and go to the model with fewer parameters.
pub fn select_and_estimate(
    res: &ResidualSet,
    candidates: &[ModelKind],
    cfg: &EmConfig,
    stream: &RngStream,
) -> Result<ModelSelectionResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("candidate set is empty".into()));
    }
    let mut fits = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for &kind in candidates {
        match fit_model(res, kind, cfg, stream) {
            Ok(f) => {
                fits.insert(kind, f);
            }
            Err(e) => {
                failures.insert(kind, e.to_string());
            }
        }
    }
    select_from(fits, failures)
}

/// BIC selection over already-fitted candidates.
pub fn select_from(
    fits: BTreeMap<ModelKind, FitReport>,
    failures: BTreeMap<ModelKind, String>,
) -> Result<ModelSelectionResult> {
    let chosen = fits
        .iter()
        .min_by(|(ka, a), (kb, b)| {
            if (a.bic - b.bic).abs() <= 1e-9 {
                ka.n_params().cmp(&kb.n_params())
            } else {
                a.bic.total_cmp(&b.bic)
            }
        })
        .map(|(k, _)| *k);
    match chosen {
        Some(kind) => Ok(ModelSelectionResult {
            chosen: kind,
            theta: fits[&kind].theta_final,
            candidates: fits,
            failures,
        }),
        None => Err(Error::AllCandidatesFailed(
            failures.into_iter().map(|(k, e)| (k.to_string(), e)).collect(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(r: &[f64], v: &[f64]) -> ResidualSet {
        ResidualSet::new(r.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn bic_arithmetic() {
        assert!((bic(-100.0, 3, 100) - 213.815_510_557_964_3).abs() < 1e-9);
        assert_eq!(bic(0.0, 0, 17), 0.0);
        assert!(bic(-10.0, 2, 50) < bic(-11.0, 2, 50));
    }

    #[test]
    fn score_theta_examples() {
        let v = [1.0, -2.0, 0.5];
        let rz: Vec<f64> = v.iter().map(|x| 0.5 * x).collect();
        assert_eq!(score_theta(&rz, &v).unwrap(), 0.5);
        assert_eq!(score_theta(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert!(score_theta(&[1.0], &[0.0]).is_err());
        assert!(score_theta(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn posterior_is_prior_without_loadings() {
        let r = res(&[0.3, -2.0, 4.0], &[1.0, 0.1, -0.7]);
        let p = ConfounderLatentParams {
            theta: 0.4,
            a: 0.0,
            b: 0.0,
            q: 0.3,
            sigma_u: 1.0,
            sigma_v: 0.5,
        };
        for pi in confounder_posterior(&r, &p).unwrap() {
            assert!((pi - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_log_odds_example() {
        let r = res(&[1.0], &[0.0]);
        let p = ConfounderLatentParams {
            theta: 0.0,
            a: 2.0,
            b: 0.0,
            q: 0.5,
            sigma_u: 1.0,
            sigma_v: 1.0,
        };
        let pi = confounder_posterior(&r, &p).unwrap()[0];
        assert!((pi - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn adjust_without_loading_is_identity() {
        let r = res(&[0.3, -2.0, 4.0], &[1.0, 0.1, -0.7]);
        let p = ConfounderLatentParams {
            theta: 0.4,
            a: 0.0,
            b: 1.5,
            q: 0.3,
            sigma_u: 1.0,
            sigma_v: 0.5,
        };
        assert_eq!(confounder_adjust(&r, &p).unwrap(), r.r_hat);
    }

    #[test]
    fn canonical_sign_flip_preserves_likelihood_and_adjustment() {
        let r = res(&[0.3, -2.0, 4.0, 1.1], &[1.0, 0.1, -0.7, 0.4]);
        let p = ConfounderLatentParams {
            theta: 0.4,
            a: 1.2,
            b: -0.8,
            q: 0.3,
            sigma_u: 1.0,
            sigma_v: 0.5,
        };
        let c = p.canonical();
        assert!(c.b > 0.0 && (c.q - 0.7).abs() < 1e-15);
        let d = confounder_marginal_loglik(&r, &p) - confounder_marginal_loglik(&r, &c);
        assert!(d.abs() < 1e-12);
        let a1 = confounder_adjust(&r, &p).unwrap();
        let a2 = confounder_adjust(&r, &c).unwrap();
        for (x, y) in a1.iter().zip(&a2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn confounder_mixture_collapses_to_gaussian() {
        let r = res(&[0.3, -2.0, 4.0, 1.1], &[1.0, 0.1, -0.7, 0.4]);
        let theta = 0.4;
        let g = gaussian_residual_loglik(&r, theta).unwrap();
        let p = ConfounderLatentParams {
            theta,
            a: 0.0,
            b: 0.0,
            q: 0.37,
            sigma_u: g.sigma_u,
            sigma_v: g.sigma_v,
        };
        assert!((confounder_marginal_loglik(&r, &p) - g.loglik).abs() < 1e-10);
        let p = ConfounderLatentParams { q: 1.0 - 1e-9, ..p };
        assert!((confounder_marginal_loglik(&r, &p) - g.loglik).abs() < 1e-6);
    }

    #[test]
    fn q_surrogate_gradient_matches_analytic() {
        let r = res(&[0.3, -2.0, 4.0, 1.1, -0.6], &[1.0, 0.1, -0.7, 0.4, -1.3]);
        let p = ConfounderLatentParams {
            theta: 0.4,
            a: 1.2,
            b: 0.8,
            q: 0.3,
            sigma_u: 1.1,
            sigma_v: 0.6,
        };
        let pi = confounder_posterior(&r, &p).unwrap();
        let analytic: f64 = r
            .pairs()
            .zip(&pi)
            .map(|((rr, v), &w)| {
                let z = w - p.q;
                let ru = rr - p.theta * v;
                w / p.q - (1.0 - w) / (1.0 - p.q)
                    - p.b * (v - p.b * z) / (p.sigma_v * p.sigma_v)
                    - p.a * (ru - p.a * z) / (p.sigma_u * p.sigma_u)
            })
            .sum();
        let fd = confounder_q_gradient_fd(&r, &pi, &p);
        assert!((fd - analytic).abs() < 1e-6, "{fd} vs {analytic}");
    }

    #[test]
    fn outcome_e_step_half_normal_case() {
        // R - theta V = 0, beta = sigma = 1 gives m = 0
        let r = res(&[0.5], &[0.5]);
        let p = OutcomeLatentParams {
            theta: 1.0,
            beta: 1.0,
            sigma_u: 1.0,
            sigma_v: 1.0,
        };
        let (z1, z2) = outcome_e_step(&r, &p).unwrap();
        assert!((z1[0] - 0.797_884_560_802_865_4).abs() < 1e-12);
        assert!((z2[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn outcome_e_step_noiseless_limit() {
        let r = res(&[3.0, 5.0], &[1.0, 2.0]);
        let p = OutcomeLatentParams {
            theta: 1.0,
            beta: 2.0,
            sigma_u: 1e-5,
            sigma_v: 1.0,
        };
        let (z1, _) = outcome_e_step(&r, &p).unwrap();
        // m_i = R - theta V + beta - sigma^2/beta
        assert!((z1[0] - 4.0).abs() < 1e-8);
        assert!((z1[1] - 5.0).abs() < 1e-8);
        let adj = outcome_adjust(&r, &p).unwrap();
        assert!((adj[0] - 1.0).abs() < 1e-8);
        assert!((adj[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn outcome_m_step_recovers_theta_when_latent_is_at_its_mean() {
        // z1 = beta exactly and R = theta0 V: the theta update is the
        // through-origin regression of R on V
        let v = [0.5, -1.0, 2.0, 0.3, -0.2];
        let r: Vec<f64> = v.iter().map(|x| 1.7 * x).collect();
        let r = res(&r, &v);
        let p = OutcomeLatentParams {
            theta: 0.0,
            beta: 1.5,
            sigma_u: 1.0,
            sigma_v: 1.0,
        };
        let z1 = vec![1.5; 5];
        let z2 = vec![1.5 * 1.5 + 0.1; 5];
        let next = outcome_m_step(&r, &z1, &z2, &p, 1.0).unwrap();
        assert!((next.theta - 1.7).abs() < 1e-14);
    }

    #[test]
    fn outcome_loglik_beta_to_zero_is_gaussian() {
        let r = res(&[0.3, -2.0, 4.0, 1.1], &[1.0, 0.1, -0.7, 0.4]);
        let theta = 0.4;
        let g = gaussian_residual_loglik(&r, theta).unwrap();
        let p = OutcomeLatentParams {
            theta,
            beta: 1e-7,
            sigma_u: g.sigma_u,
            sigma_v: g.sigma_v,
        };
        assert!((outcome_marginal_loglik(&r, &p) - g.loglik).abs() < 1e-3);
    }

    #[test]
    fn outcome_em_reaches_gaussian_limit_on_symmetric_noise() {
        let mut s = RngStream::new(11);
        let v: Vec<f64> = (0..300).map(|_| 0.5 * s.standard_normal()).collect();
        let r: Vec<f64> = v.iter().map(|&v| 0.8 * v + s.standard_normal()).collect();
        let r = res(&r, &v);
        let fit = fit_outcome_em(&r, None, &EmConfig::default()).unwrap();
        assert!(fit.converged, "stalled after {} iterations", fit.iterations);
        assert_eq!(fit.ascent_violations(ASCENT_SLACK), 0);
        let g = gaussian_residual_loglik(&r, fit_ordinary(&r).unwrap().theta_final).unwrap();
        assert!(fit.loglik >= g.loglik - 1e-6);
    }

    #[test]
    fn model_kind_round_trips_through_strings() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
        assert!(matches!("bogus".parse::<ModelKind>(), Err(Error::NotFound { .. })));
    }

    #[test]
    fn selection_requires_candidates() {
        let r = res(&[0.3, -2.0, 4.0, 1.1], &[1.0, 0.1, -0.7, 0.4]);
        assert!(select_and_estimate(&r, &[], &EmConfig::default(), &RngStream::new(0)).is_err());
    }
}
