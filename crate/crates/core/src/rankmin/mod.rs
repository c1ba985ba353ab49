//! Low-rank synthesis of `Φu` under a spectral-norm gain budget.
//!
//! With `Φx` eliminated through the affine constraint, the budgeted operator
//! is affine in `Φu`:
//!
//! ```text
//! blkdiag(𝒬^{1/2}, ℛ^{1/2}) [Φx; Φu] = G0 + H Φu,
//! G0 = [𝒬^{1/2} L; 0],  H = [𝒬^{1/2} L Zℬ; ℛ^{1/2}],  L = (I − Z𝒜)^{-1}.
//! ```
//!
//! Each convex round minimizes a weighted nuclear norm of `Φu` subject to
//! `‖G0 + HΦu‖ ≤ budget` with the ADMM engine in [`admm`].

mod admm;
pub mod heuristics;

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifted::{BlockLtMatrix, LiftedOperators};
use crate::linalg;
use crate::sls;

use admm::{Admm, AdmmSettings, Prox, Support, Term};
pub use heuristics::{HeuristicRegistry, RankHeuristic, Weights};

/// Relative shrink applied to the budget inside the solver so that exact
/// post-hoc verification against the nominal budget passes.
pub const BUDGET_MARGIN: f64 = 1e-9;

const RADIUS_RETRIES: usize = 4;

const ADMM_RELAXATION: f64 = 1.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub reweight_iters: usize,
    pub delta: f64,
    pub admm_rho: f64,
    pub admm_max_iters: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub rank_tol: f64,
    /// Name of a [`RankHeuristic`] in the builtin registry.
    pub heuristic: String,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            reweight_iters: 8,
            delta: 0.01,
            admm_rho: 1.0,
            admm_max_iters: 5000,
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            rank_tol: 1e-6,
            heuristic: "reweighted".to_string(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("delta", self.delta),
            ("admm_rho", self.admm_rho),
            ("tol_primal", self.tol_primal),
            ("tol_dual", self.tol_dual),
            ("rank_tol", self.rank_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.reweight_iters == 0 {
            return Err(Error::InvalidConfig("reweight_iters must be positive".into()));
        }
        if self.admm_max_iters == 0 {
            return Err(Error::InvalidConfig("admm_max_iters must be positive".into()));
        }
        if self.rank_tol >= 1.0 {
            return Err(Error::InvalidConfig(format!("rank_tol must be below 1, got {}", self.rank_tol)));
        }
        heuristics::builtin().get(&self.heuristic)?;
        Ok(())
    }

    fn admm(&self) -> AdmmSettings {
        AdmmSettings {
            rho: self.admm_rho,
            max_iters: self.admm_max_iters,
            tol_primal: self.tol_primal,
            tol_dual: self.tol_dual,
            proximal: 0.0,
            relaxation: ADMM_RELAXATION,
        }
    }
}

/// Per-round record of the reweighted loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round: usize,
    /// Weighted nuclear norm of the round's solution under the round's weights.
    pub objective: f64,
    /// Same weights evaluated at the warm start (the previous round's solution).
    pub warm_start_objective: f64,
    /// `‖G0 + HΦu‖`.
    pub gain_norm: f64,
    /// `max(0, gain_norm − budget)`.
    pub feasibility_residual: f64,
    pub affine_residual: f64,
    pub singular_values: Vec<f64>,
    pub numerical_rank: usize,
    pub inner_iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub final_rho: f64,
    /// Convex-combination weight toward the feasibility center (0 if unused).
    pub repair_weight: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub heuristic: String,
    pub budget: f64,
    /// Smallest budgeted norm found over all block-lower-triangular `Φu`.
    pub min_budget_norm: f64,
    pub rounds: Vec<RoundDiagnostics>,
    pub total_time_secs: f64,
}

/// The affine operator `Φu ↦ (G0 + HΦu)·right`.
#[derive(Debug, Clone)]
pub struct GainAffineMap {
    pub offset: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub right: Option<DMatrix<f64>>,
}

impl GainAffineMap {
    /// Budgeted operator `blkdiag(𝒬^{1/2}, ℛ^{1/2})[Φx; Φu]` (no disturbance map).
    pub fn budget(ops: &LiftedOperators) -> Self {
        let n = ops.blocks() * ops.n_x;
        let open_loop = ops.open_loop_operator().solve_left(&DMatrix::identity(n, n));
        let ql = &ops.q_half * &open_loop;
        let qlzb = &ql * ops.shifted_input();
        let m_u = ops.blocks() * ops.n_u;
        let mut offset = DMatrix::zeros(n + m_u, n);
        offset.rows_mut(0, n).copy_from(&ql);
        let mut input = DMatrix::zeros(n + m_u, m_u);
        input.rows_mut(0, n).copy_from(&qlzb);
        input.rows_mut(n, m_u).copy_from(&ops.r_half);
        GainAffineMap {
            offset,
            input,
            right: None,
        }
    }

    /// Full gain operator including `𝒟`.
    pub fn gain(ops: &LiftedOperators) -> Self {
        let mut map = Self::budget(ops);
        map.right = Some(ops.cal_d.clone());
        map
    }

    pub fn apply(&self, phi_u: &DMatrix<f64>) -> DMatrix<f64> {
        let g = &self.offset + &self.input * phi_u;
        match &self.right {
            Some(r) => g * r,
            None => g,
        }
    }

    pub fn norm_at(&self, phi_u: &DMatrix<f64>) -> f64 {
        linalg::spectral_norm(&self.apply(phi_u))
    }

    fn term(&self, prox: Prox) -> Term {
        let offset = match &self.right {
            Some(r) => &self.offset * r,
            None => self.offset.clone(),
        };
        Term {
            left: self.input.clone(),
            right: self.right.clone(),
            offset,
            prox,
        }
    }
}

fn support_of(ops: &LiftedOperators) -> Support {
    Support::block_lower(ops.blocks(), ops.n_u, ops.n_x)
}

/// A strictly feasible reference point for the budgeted constraint.
#[derive(Debug, Clone)]
pub struct FeasibilityCertificate {
    pub min_norm: f64,
    pub center: BlockLtMatrix,
}

fn minimize_spectral(map: &GainAffineMap, ops: &LiftedOperators, cfg: &SolverConfig) -> FeasibilityCertificate {
    let support = support_of(ops);
    let term = map.term(Prox::SpectralNorm);
    let scale = term.left.tr_mul(&term.left).diagonal().amax().max(1.0);
    let mut settings = cfg.admm();
    settings.proximal = 1e-8 * scale;
    let zero = DMatrix::zeros(support.rows, support.cols);
    let out = admm::solve(&support, &[term], &settings, &zero);
    let mut center = out.x;
    let mut min_norm = map.norm_at(&center);
    // Φu = 0 may already beat an unconverged iterate.
    let at_zero = map.norm_at(&zero);
    if at_zero < min_norm {
        center = zero;
        min_norm = at_zero;
    }
    log::debug!(
        "spectral minimization: {} iterations, converged = {}, norm = {min_norm}",
        out.iterations,
        out.converged
    );
    FeasibilityCertificate {
        min_norm,
        center: BlockLtMatrix::from_lower(center, ops.n_u, ops.n_x),
    }
}

/// Minimum over block-lower-triangular `Φu` of the exact L2 gain
/// `‖gain_matrix(Φx(Φu), Φu)‖` (rank unconstrained).
pub fn min_achievable_gain(ops: &LiftedOperators, cfg: &SolverConfig) -> f64 {
    minimize_spectral(&GainAffineMap::gain(ops), ops, cfg).min_norm
}

/// Minimum of the budgeted norm; its minimizer serves as feasibility center.
pub fn min_budget_norm(ops: &LiftedOperators, cfg: &SolverConfig) -> FeasibilityCertificate {
    minimize_spectral(&GainAffineMap::budget(ops), ops, cfg)
}

pub fn numerical_rank(m: &DMatrix<f64>, rank_tol: f64) -> usize {
    linalg::numerical_rank(m, rank_tol)
}

/// Outcome of one weighted convex round.
#[derive(Debug, Clone)]
pub struct InnerReport {
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub final_rho: f64,
    pub gain_norm: f64,
    pub repair_weight: f64,
}

fn check_budget(budget: f64, cert: &FeasibilityCertificate) -> Result<f64> {
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(Error::InvalidConfig(format!("gain budget must be positive, got {budget}")));
    }
    let internal = budget * (1.0 - BUDGET_MARGIN);
    if cert.min_norm >= internal {
        return Err(Error::Infeasible {
            budget,
            min_gain: cert.min_norm,
        });
    }
    Ok(internal)
}

fn solve_round(
    weights: &Weights,
    internal_budget: f64,
    map: &GainAffineMap,
    cert: &FeasibilityCertificate,
    ops: &LiftedOperators,
    cfg: &SolverConfig,
    warm_start: &DMatrix<f64>,
) -> (BlockLtMatrix, InnerReport) {
    let support = support_of(ops);
    let right = if weights.right == DMatrix::identity(weights.right.nrows(), weights.right.nrows()) {
        None
    } else {
        Some(weights.right.clone())
    };
    let nuclear = Term {
        left: weights.left.clone(),
        right,
        offset: DMatrix::zeros(support.rows, support.cols),
        prox: Prox::NuclearNorm,
    };
    let mut radius = internal_budget;
    let mut solver = Admm::new(
        &support,
        vec![nuclear, map.term(Prox::SpectralBall { radius })],
        cfg.admm(),
    );
    let mut state = solver.start(warm_start);
    let mut iterations = 0;
    let mut out;
    let mut gain_norm;
    let mut attempt = 0;
    loop {
        out = solver.run(&mut state);
        iterations += out.iterations;
        gain_norm = map.norm_at(&out.x);
        attempt += 1;
        if gain_norm <= internal_budget || attempt > RADIUS_RETRIES {
            break;
        }
        // The iterate overshoots the ball by roughly the primal residual:
        // tighten the ball and resume.
        let overshoot = gain_norm - radius.min(internal_budget);
        radius = (radius - 2.0 * overshoot.max(internal_budget * f64::EPSILON * 16.0)).max(cert.min_norm);
        solver.terms[1].prox = Prox::SpectralBall { radius };
        log::debug!("constraint overshoot {overshoot:e}; resuming with radius {radius}");
    }
    let mut x = out.x.clone();
    let mut repair_weight = 0.0;
    if gain_norm > internal_budget {
        // Pull toward the strictly feasible center; the map is affine so the
        // norm is convex along the segment.
        let c = cert.center.data();
        let mut lambda = ((gain_norm - internal_budget) / (gain_norm - cert.min_norm)).min(1.0);
        loop {
            let candidate = &x * (1.0 - lambda) + c * lambda;
            let g = map.norm_at(&candidate);
            if g <= internal_budget || lambda >= 1.0 {
                x = candidate;
                gain_norm = g;
                break;
            }
            lambda = (lambda * 1.5).min(1.0);
        }
        repair_weight = lambda;
        log::debug!("feasibility repair with weight {lambda:e}");
    }
    (
        BlockLtMatrix::from_lower(x, ops.n_u, ops.n_x),
        InnerReport {
            iterations,
            converged: out.converged,
            primal_residual: out.primal_residual,
            dual_residual: out.dual_residual,
            final_rho: out.rho,
            gain_norm,
            repair_weight,
        },
    )
}

fn check_weight_dims(weights: &Weights, ops: &LiftedOperators) -> Result<()> {
    let (m, n) = (ops.blocks() * ops.n_u, ops.blocks() * ops.n_x);
    if weights.left.shape() != (m, m) {
        return Err(Error::dims("W1", format!("{m}x{m}"), format!("{:?}", weights.left.shape())));
    }
    if weights.right.shape() != (n, n) {
        return Err(Error::dims("W2", format!("{n}x{n}"), format!("{:?}", weights.right.shape())));
    }
    Ok(())
}

/// One convex round: `min ‖W1 Φu W2‖_*` s.t. `Φu` block-lower-triangular and
/// `‖blkdiag(𝒬^{1/2}, ℛ^{1/2})[Φx; Φu]‖ ≤ gamma_budget`.
pub fn solve_weighted_nuclear(
    w1: &DMatrix<f64>,
    w2: &DMatrix<f64>,
    gamma_budget: f64,
    ops: &LiftedOperators,
    cfg: &SolverConfig,
    warm_start: Option<&BlockLtMatrix>,
) -> Result<(BlockLtMatrix, InnerReport)> {
    cfg.validate()?;
    let weights = Weights {
        left: w1.clone(),
        right: w2.clone(),
    };
    check_weight_dims(&weights, ops)?;
    let cert = min_budget_norm(ops, cfg);
    let internal = check_budget(gamma_budget, &cert)?;
    let map = GainAffineMap::budget(ops);
    let zero = DMatrix::zeros(ops.blocks() * ops.n_u, ops.blocks() * ops.n_x);
    let warm = warm_start.map_or(&zero, |w| w.data());
    Ok(solve_round(&weights, internal, &map, &cert, ops, cfg, warm))
}

fn weighted_nuclear(weights: &Weights, x: &DMatrix<f64>) -> f64 {
    linalg::singular_values(&(&weights.left * x * &weights.right)).iter().sum()
}

/// Reweighted nuclear-norm loop with the heuristic named in `cfg`.
pub fn reweighted_rank_min(
    gamma_budget: f64,
    ops: &LiftedOperators,
    cfg: &SolverConfig,
) -> Result<(BlockLtMatrix, SolveDiagnostics)> {
    cfg.validate()?;
    let heuristic = heuristics::builtin().get(&cfg.heuristic)?;
    let start = Instant::now();
    let cert = min_budget_norm(ops, cfg);
    let internal = check_budget(gamma_budget, &cert)?;
    let map = GainAffineMap::budget(ops);
    let (m, n) = (ops.blocks() * ops.n_u, ops.blocks() * ops.n_x);

    let mut weights = Weights::identity(m, n);
    let mut x = DMatrix::zeros(m, n);
    let mut rounds = Vec::new();
    let total = heuristic.rounds(cfg.reweight_iters);
    for round in 0..total {
        let t0 = Instant::now();
        let warm_start_objective = weighted_nuclear(&weights, &x);
        let (phi_u, report) = solve_round(&weights, internal, &map, &cert, ops, cfg, &x);
        x = phi_u.data().clone();
        let objective = weighted_nuclear(&weights, &x);
        let singular_values = linalg::singular_values(&x);
        let affine_residual = sls::response_from_phi_u(phi_u, ops)?.affine_residual(ops);
        let numerical_rank = linalg::numerical_rank(&x, cfg.rank_tol);
        log::info!(
            "round {round}: objective {objective:.6e}, rank {numerical_rank}, {} iterations (converged: {})",
            report.iterations,
            report.converged
        );
        rounds.push(RoundDiagnostics {
            round,
            objective,
            warm_start_objective,
            gain_norm: report.gain_norm,
            feasibility_residual: (report.gain_norm - gamma_budget).max(0.0),
            affine_residual,
            singular_values,
            numerical_rank,
            inner_iterations: report.iterations,
            converged: report.converged,
            primal_residual: report.primal_residual,
            dual_residual: report.dual_residual,
            final_rho: report.final_rho,
            repair_weight: report.repair_weight,
            wall_time_secs: t0.elapsed().as_secs_f64(),
        });
        if round + 1 < total {
            weights = heuristic.next_weights(&x, cfg.delta);
        }
    }
    let diagnostics = SolveDiagnostics {
        heuristic: heuristic.name().to_string(),
        budget: gamma_budget,
        min_budget_norm: cert.min_norm,
        rounds,
        total_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((BlockLtMatrix::from_lower(x, ops.n_u, ops.n_x), diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifted::{lift, SystemSpec};

    fn scalar_spec(a: f64, b: f64, horizon: usize) -> SystemSpec {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        SystemSpec::new(m(a), m(b), m(1.0), m(1.0), m(1.0), horizon, 10.0).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig { rank_tol: 1.5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let bad = SolverConfig { heuristic: "nope".into(), ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::UnknownHeuristic(_))));
    }

    #[test]
    fn budget_map_matches_eliminated_response() {
        let ops = lift(&scalar_spec(1.1, 0.5, 3));
        let phi_u = BlockLtMatrix::from_lower(DMatrix::from_fn(4, 4, |i, j| 0.1 * (i + 2 * j) as f64 - 0.3), 1, 1);
        let resp = sls::response_from_phi_u(phi_u.clone(), &ops).unwrap();
        let direct = sls::stacked_cost(&resp, &ops);
        let via_map = GainAffineMap::budget(&ops).apply(phi_u.data());
        assert!((direct - via_map).norm() < 1e-12);
        let gain = GainAffineMap::gain(&ops).norm_at(phi_u.data());
        assert!((gain - sls::l2_gain(&resp, &ops)).abs() < 1e-12);
    }

    #[test]
    fn zero_is_optimal_for_loose_budget() {
        let ops = lift(&scalar_spec(0.5, 1.0, 2));
        let map = GainAffineMap::budget(&ops);
        let open = map.norm_at(&DMatrix::zeros(3, 3));
        let eye = DMatrix::identity(3, 3);
        let cfg = SolverConfig::default();
        let (phi_u, _) = solve_weighted_nuclear(&eye, &eye, open * 1.5, &ops, &cfg, None).unwrap();
        let nuc: f64 = linalg::singular_values(phi_u.data()).iter().sum();
        assert!(nuc <= cfg.tol_primal, "nuclear norm {nuc}");
    }

    #[test]
    fn tiny_budget_is_infeasible() {
        let ops = lift(&scalar_spec(1.2, 1.0, 2));
        let eye = DMatrix::identity(3, 3);
        let res = solve_weighted_nuclear(&eye, &eye, 0.01, &ops, &SolverConfig::default(), None);
        assert!(matches!(res, Err(Error::Infeasible { .. })));
    }

    #[test]
    fn no_control_authority_min_gain_is_one() {
        let z = DMatrix::zeros(2, 2);
        let eye = DMatrix::identity(2, 2);
        let spec = SystemSpec::new(z.clone(), z, eye.clone(), eye.clone(), eye, 3, 1.0).unwrap();
        let g = min_achievable_gain(&lift(&spec), &SolverConfig::default());
        assert!((g - 1.0).abs() < 1e-6, "{g}");
    }
}
