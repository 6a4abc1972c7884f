//! Black-box membership verification by hypothesis test.
//!
//! The data owner queries the suspect model with `m` triggered probes and
//! measures the attack success rate α. Under the null hypothesis the model
//! is clean and its success probability is at most β = 1/K; the null is
//! rejected at significance level 1 − τ when
//!
//! ```text
//! sqrt(m − 1) · (α − β) − sqrt(α − α²) · t_τ > 0
//! ```
//!
//! with `t_τ` the upper-tail critical value of Student's t with m − 1
//! degrees of freedom. A rejected null means the trigger demonstrably
//! activates a backdoor, so the owner's marked data was trained on.
//!
//! Note the critical value is the upper-tail one (the 1 − τ quantile): the
//! literal lower τ quantile is negative and cannot produce the standard
//! thresholds of 65.1% / 40.5% / 35.1% for (m = 30, τ = 0.05) at
//! K = 2 / 4 / 5, which this module reproduces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::marking::TextSample;
use crate::model::{asr, BlackBoxModel, ModelError};
use crate::stats::t_tail_inverse;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid test parameters: {0}")]
    InvalidParams(String),
    #[error("statistic never becomes positive on (beta, 1)")]
    NoCrossing,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Membership decision for one user, also used as ground truth in
/// evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    Member,
    NonMember,
}

impl std::fmt::Display for Membership {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Membership::Member => write!(f, "member"),
            Membership::NonMember => write!(f, "non_member"),
        }
    }
}

/// Parameters of the one-sided test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestParams {
    /// Number of probe queries. Values below 30 are accepted with a
    /// recorded warning: the normal approximation behind the test is only
    /// justified from 30 queries up.
    pub m: usize,
    /// Number of classes of the target task.
    pub k: usize,
    /// Significance parameter; the null is rejected at level 1 − τ.
    pub tau: f64,
    /// Clean-model success probability; defaults to 1/K.
    pub beta: f64,
}

impl TestParams {
    pub fn new(m: usize, k: usize, tau: f64) -> Result<Self, VerifyError> {
        Self::with_beta(m, k, tau, 1.0 / k as f64)
    }

    pub fn with_beta(m: usize, k: usize, tau: f64, beta: f64) -> Result<Self, VerifyError> {
        if m < 2 {
            return Err(VerifyError::InvalidParams(format!(
                "m = {m}: need at least 2 queries for m - 1 degrees of freedom"
            )));
        }
        if k < 2 {
            return Err(VerifyError::InvalidParams(format!(
                "k = {k}: need at least 2 classes"
            )));
        }
        if !(tau > 0.0 && tau < 0.5) {
            return Err(VerifyError::InvalidParams(format!(
                "tau = {tau}: must lie in (0, 0.5)"
            )));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(VerifyError::InvalidParams(format!(
                "beta = {beta}: must lie in (0, 1)"
            )));
        }
        Ok(TestParams { m, k, tau, beta })
    }

    /// True when m is below the validity bound of the normal
    /// approximation.
    pub fn below_recommended_queries(&self) -> bool {
        self.m < 30
    }
}

/// Upper-tail critical value: the t with P(T_df > t) = tau, computed by
/// numeric inversion of the t CDF through the regularized incomplete beta,
/// to absolute tolerance better than 1e-9.
pub fn t_upper_critical(df: usize, tau: f64) -> f64 {
    assert!(df >= 1, "degrees of freedom must be at least 1");
    assert!(tau > 0.0 && tau < 0.5, "tau must lie in (0, 0.5)");
    t_tail_inverse(df as f64, tau)
}

/// The test statistic sqrt(m − 1)(α − β) − sqrt(α − α²) t_τ. Positive
/// values reject the null.
pub fn test_statistic(alpha: f64, params: &TestParams) -> f64 {
    let t_tau = t_upper_critical(params.m - 1, params.tau);
    statistic_with_t(alpha, params, t_tau)
}

fn statistic_with_t(alpha: f64, params: &TestParams, t_tau: f64) -> f64 {
    let m1 = (params.m - 1) as f64;
    // alpha in {0, 1} zeroes the variance term; guard the fp residue.
    let var = (alpha - alpha * alpha).max(0.0);
    m1.sqrt() * (alpha - params.beta) - var.sqrt() * t_tau
}

/// Smallest ASR in (β, 1) at which the test rejects: a dense grid scan at
/// step 1e-4 locates the sign change, then bisection narrows it to 1e-6.
///
/// Grid plus bisection is used instead of solving the squared quadratic,
/// which introduces spurious roots.
pub fn asr_threshold(params: &TestParams) -> Result<f64, VerifyError> {
    let t_tau = t_upper_critical(params.m - 1, params.tau);
    let step = 1e-4;
    let mut prev = params.beta;
    let mut alpha = params.beta + step;
    let mut crossing = None;
    while alpha < 1.0 + step {
        let a = alpha.min(1.0);
        if statistic_with_t(a, params, t_tau) > 0.0 {
            crossing = Some((prev, a));
            break;
        }
        prev = a;
        alpha += step;
    }
    let (mut lo, mut hi) = crossing.ok_or(VerifyError::NoCrossing)?;
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if statistic_with_t(mid, params, t_tau) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Outcome of one verification run. Serializes with stable field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub alpha: f64,
    pub threshold: f64,
    pub statistic: f64,
    pub decision: Membership,
    pub m: usize,
    pub k: usize,
    pub tau: f64,
    pub beta: f64,
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Queries the model with the probes, measures the ASR, and decides
/// membership: Member exactly when the test statistic is positive.
pub fn verify(
    model: &dyn BlackBoxModel,
    probes: &[TextSample],
    params: &TestParams,
    user_id: &str,
) -> Result<VerificationReport, VerifyError> {
    if probes.len() != params.m {
        return Err(VerifyError::InvalidParams(format!(
            "probe count {} does not match m = {}",
            probes.len(),
            params.m
        )));
    }
    let alpha = asr(model, probes)?;
    let statistic = test_statistic(alpha, params);
    let threshold = asr_threshold(params)?;
    let decision = if statistic > 0.0 {
        Membership::Member
    } else {
        Membership::NonMember
    };
    let mut warnings = Vec::new();
    if params.below_recommended_queries() {
        warnings.push(format!(
            "m = {} is below the recommended minimum of 30 queries",
            params.m
        ));
    }
    Ok(VerificationReport {
        alpha,
        threshold,
        statistic,
        decision,
        m: params.m,
        k: params.k,
        tau: params.tau,
        beta: params.beta,
        user_id: user_id.to_string(),
        warnings,
    })
}
