//! Tightened gain budget under factorization error and end-to-end verification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{exact_factorization_of_k, CausalFactorization};
use crate::lifted::{lift, LiftedOperators, SystemSpec};
use crate::linalg;
use crate::rankmin::GainAffineMap;
use crate::sls::{self, SystemResponse};

/// `γ_ε = γ/β_ε − α_ε` with `α_ε = ‖ℛ^{1/2}‖ε` and
/// `β_ε = ‖𝒟‖ Σ_{t=0}^{T} (‖Zℬ‖ε)^t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustBudget {
    pub gamma: f64,
    pub epsilon: f64,
    pub alpha_eps: f64,
    pub beta_eps: f64,
    pub gamma_eps: f64,
    pub norm_r_half: f64,
    pub norm_d: f64,
    pub norm_zb: f64,
    pub horizon: usize,
}

/// `Σ_{t=0}^{T} q^t` with `0⁰ = 1`.
fn geometric_sum(q: f64, horizon: usize) -> f64 {
    if q == 0.0 {
        return 1.0;
    }
    if q < 1.0 {
        return (1.0 - q.powi(horizon as i32 + 1)) / (1.0 - q);
    }
    if q == 1.0 {
        return (horizon + 1) as f64;
    }
    // Largest term dominates; accumulate in log space relative to it.
    let ln_q = q.ln();
    let top = horizon as f64 * ln_q;
    let rel: f64 = (0..=horizon).map(|t| ((t as f64) * ln_q - top).exp()).sum();
    let ln_sum = top + rel.ln();
    if ln_sum > f64::MAX.ln() {
        f64::INFINITY
    } else {
        ln_sum.exp()
    }
}

impl RobustBudget {
    /// Budget from the three operator norms directly.
    pub fn from_norms(
        gamma: f64,
        epsilon: f64,
        norm_r_half: f64,
        norm_d: f64,
        norm_zb: f64,
        horizon: usize,
    ) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be finite and nonnegative, got {gamma}")));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be finite and nonnegative, got {epsilon}")));
        }
        let alpha_eps = norm_r_half * epsilon;
        let beta_eps = norm_d * geometric_sum(norm_zb * epsilon, horizon);
        let gamma_eps = gamma / beta_eps - alpha_eps;
        if !(gamma_eps > 0.0) {
            return Err(Error::InfeasibleBudget {
                gamma,
                epsilon,
                gamma_eps,
            });
        }
        Ok(RobustBudget {
            gamma,
            epsilon,
            alpha_eps,
            beta_eps,
            gamma_eps,
            norm_r_half,
            norm_d,
            norm_zb,
            horizon,
        })
    }
}

pub fn gamma_eps(gamma: f64, epsilon: f64, ops: &LiftedOperators) -> Result<RobustBudget> {
    RobustBudget::from_norms(
        gamma,
        epsilon,
        linalg::spectral_norm(&ops.r_half),
        linalg::spectral_norm(&ops.cal_d),
        linalg::spectral_norm(&ops.shifted_input()),
        ops.horizon,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub gamma: f64,
    pub gamma_eps: f64,
    pub epsilon: f64,
    /// Measured `‖Φu − DE‖`.
    pub residual_norm: f64,
    /// `‖blkdiag(𝒬^{1/2}, ℛ^{1/2})[Φx; Φu]‖` of the designed response.
    pub design_norm: f64,
    /// Exact L2 gain of the implemented controller's closed loop.
    pub achieved_gain: f64,
    /// `gamma − achieved_gain`.
    pub slack: f64,
}

/// Rebuilds `K̃ = D E Φx^{-1}` from an ε-factorization of `Φu`, computes its
/// true closed-loop response, and checks its exact gain against `γ`.
pub fn verify_guarantee(
    spec: &SystemSpec,
    resp: &SystemResponse,
    f: &CausalFactorization,
) -> Result<VerifyReport> {
    let ops = lift(spec);
    let budget = gamma_eps(spec.gamma(), f.epsilon, &ops)?;
    let residual_norm = linalg::spectral_norm(&(resp.phi_u.data() - f.product()));
    let tol = if f.epsilon == 0.0 {
        crate::factorization::TOL_EXACT
    } else {
        f.epsilon
    };
    if residual_norm > tol {
        return Err(Error::PreconditionFailed(format!(
            "factorization residual {residual_norm:e} exceeds epsilon {tol:e}"
        )));
    }
    let affine = resp.affine_residual(&ops);
    if affine > sls::TOL_AFFINE {
        return Err(Error::PreconditionFailed(format!(
            "response violates the affine constraint (residual {affine:e})"
        )));
    }
    let design_norm = GainAffineMap::budget(&ops).norm_at(resp.phi_u.data());
    if design_norm > budget.gamma_eps {
        return Err(Error::PreconditionFailed(format!(
            "designed response norm {design_norm} exceeds the budget {}",
            budget.gamma_eps
        )));
    }
    let (_, k) = exact_factorization_of_k(f, &resp.phi_x)?;
    let closed = sls::response_from_controller(&k, &ops);
    let achieved_gain = sls::l2_gain(&closed, &ops);
    let report = VerifyReport {
        gamma: spec.gamma(),
        gamma_eps: budget.gamma_eps,
        epsilon: f.epsilon,
        residual_norm,
        design_norm,
        achieved_gain,
        slack: spec.gamma() - achieved_gain,
    };
    log::info!(
        "guarantee check: achieved gain {achieved_gain:.9} vs gamma {} (slack {:e})",
        report.gamma,
        report.slack
    );
    if achieved_gain > spec.gamma() {
        return Err(Error::GuaranteeViolated(Box::new(report)));
    }
    Ok(report)
}
