use nalgebra::DMatrix;

use sparselink::lifted::{assert_blt, lift, SystemSpec};
use sparselink::linalg;
use sparselink::pipeline::double_integrator;
use sparselink::rankmin::{
    min_achievable_gain, min_budget_norm, numerical_rank, reweighted_rank_min, solve_weighted_nuclear,
    GainAffineMap, SolverConfig,
};
use sparselink::Error;

fn scalar(a: f64, b: f64, horizon: usize) -> SystemSpec {
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    SystemSpec::new(m(a), m(b), m(1.0), m(1.0), m(1.0), horizon, 1.0).unwrap()
}

fn sv2(m: [[f64; 2]; 2]) -> (f64, f64) {
    // Singular values of a 2x2 matrix from the invariants of MᵀM.
    let [[p, q], [r, s]] = m;
    let fro = p * p + q * q + r * r + s * s;
    let det = (p * s - q * r).abs();
    let disc = (fro * fro - 4.0 * det * det).max(0.0).sqrt();
    (((fro + disc) / 2.0).sqrt(), ((fro - disc) / 2.0).max(0.0).sqrt())
}

/// ‖[Φx; Φu]‖ for n_x = n_u = 1, T = 1, Q = R = D = 1 and Φu = [[a, 0], [b, c]].
fn oracle_gain(a0: f64, b0: f64, phi: [f64; 3]) -> f64 {
    let [a, b, c] = phi;
    // Columns of [[1,0],[a0 + b0 a, 1],[a,0],[b,c]].
    let col0 = [1.0, a0 + b0 * a, a, b];
    let col1 = [0.0, 1.0, 0.0, c];
    let g00: f64 = col0.iter().map(|v| v * v).sum();
    let g11: f64 = col1.iter().map(|v| v * v).sum();
    let g01: f64 = col0.iter().zip(&col1).map(|(x, y)| x * y).sum();
    let tr = g00 + g11;
    let det = g00 * g11 - g01 * g01;
    ((tr + (tr * tr - 4.0 * det).max(0.0).sqrt()) / 2.0).sqrt()
}

fn oracle_nuclear(phi: [f64; 3]) -> f64 {
    let (s1, s2) = sv2([[phi[0], 0.0], [phi[1], phi[2]]]);
    s1 + s2
}

/// Shrinking-box grid search of `objective` over `{gain ≤ budget}`.
fn grid_minimize(objective: impl Fn([f64; 3]) -> f64, feasible: impl Fn([f64; 3]) -> bool) -> f64 {
    let mut center = [0.0; 3];
    let mut half = 4.0;
    let mut best = f64::INFINITY;
    let steps = 24;
    for _ in 0..14 {
        let mut improved = None;
        for i in 0..=steps {
            for j in 0..=steps {
                for k in 0..=steps {
                    let p = [
                        center[0] - half + 2.0 * half * i as f64 / steps as f64,
                        center[1] - half + 2.0 * half * j as f64 / steps as f64,
                        center[2] - half + 2.0 * half * k as f64 / steps as f64,
                    ];
                    if feasible(p) {
                        let v = objective(p);
                        if v < best {
                            best = v;
                            improved = Some(p);
                        }
                    }
                }
            }
        }
        if let Some(p) = improved {
            center = p;
        }
        half *= 0.5;
    }
    best
}

#[test]
fn nuclear_round_matches_grid_oracle_on_tiny_instances() {
    for &(a0, b0) in &[(1.5, 1.0), (0.8, -0.5), (-1.2, 2.0)] {
        let spec = scalar(a0, b0, 1);
        let ops = lift(&spec);
        let min_gain = grid_minimize(|p| oracle_gain(a0, b0, p), |_| true);
        let open = oracle_gain(a0, b0, [0.0; 3]);
        let budget = 0.5 * (min_gain + open);
        let oracle = grid_minimize(oracle_nuclear, |p| oracle_gain(a0, b0, p) <= budget);

        let cfg = SolverConfig::default();
        let eye = DMatrix::identity(2, 2);
        let (phi_u, _) = solve_weighted_nuclear(&eye, &eye, budget, &ops, &cfg, None).unwrap();
        let x = phi_u.data();
        let ours = oracle_nuclear([x[(0, 0)], x[(1, 0)], x[(1, 1)]]);
        let gap = (ours - oracle).abs() / oracle;
        assert!(gap <= 0.05, "a0 = {a0}: solver {ours} vs oracle {oracle}");
        assert!(oracle_gain(a0, b0, [x[(0, 0)], x[(1, 0)], x[(1, 1)]]) <= budget + cfg.tol_primal);

        let g = min_budget_norm(&ops, &cfg).min_norm;
        assert!((g - min_gain).abs() <= 1e-4 * min_gain, "min norm {g} vs oracle {min_gain}");
    }
}

fn small_di() -> SystemSpec {
    double_integrator(0.1, 1.0, 5, 1.0).unwrap()
}

#[test]
fn reweighted_output_is_feasible_structured_and_monotone() {
    let spec = small_di();
    let ops = lift(&spec);
    let cfg = SolverConfig::default();
    let budget = 1.05 * min_budget_norm(&ops, &cfg).min_norm;
    let (phi_u, diag) = reweighted_rank_min(budget, &ops, &cfg).unwrap();
    assert!(assert_blt(phi_u.data(), 2, 4).is_ok());
    assert_eq!(diag.rounds.len(), cfg.reweight_iters);
    let gain = GainAffineMap::budget(&ops).norm_at(phi_u.data());
    assert!(gain <= budget, "{gain} > {budget}");
    for r in &diag.rounds {
        assert!(r.feasibility_residual <= cfg.tol_primal);
        assert!(r.affine_residual <= 1e-10);
        if r.round > 0 {
            let slack = cfg.tol_dual * (1.0 + r.warm_start_objective);
            assert!(
                r.objective <= r.warm_start_objective + slack,
                "round {}: {} > {}",
                r.round,
                r.objective,
                r.warm_start_objective
            );
        }
    }
}

#[test]
fn solver_is_deterministic() {
    let spec = small_di();
    let ops = lift(&spec);
    let cfg = SolverConfig {
        reweight_iters: 3,
        ..Default::default()
    };
    let budget = 1.2 * min_budget_norm(&ops, &cfg).min_norm;
    let (a, _) = reweighted_rank_min(budget, &ops, &cfg).unwrap();
    let (b, _) = reweighted_rank_min(budget, &ops, &cfg).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn more_reweighting_does_not_increase_rank() {
    let spec = small_di();
    let ops = lift(&spec);
    let base = SolverConfig::default();
    let budget = 1.1 * min_budget_norm(&ops, &base).min_norm;
    let one = SolverConfig {
        reweight_iters: 1,
        ..base.clone()
    };
    let (x1, _) = reweighted_rank_min(budget, &ops, &one).unwrap();
    let (x8, _) = reweighted_rank_min(budget, &ops, &base).unwrap();
    let (r1, r8) = (numerical_rank(x1.data(), base.rank_tol), numerical_rank(x8.data(), base.rank_tol));
    assert!(r1 >= r8, "1 round rank {r1} < 8 rounds rank {r8}");
}

#[test]
fn huge_budget_gives_zero() {
    let ops = lift(&small_di());
    let (x, _) = reweighted_rank_min(1e6, &ops, &SolverConfig::default()).unwrap();
    assert_eq!(numerical_rank(x.data(), 1e-6), 0);
    assert!(linalg::max_abs(x.data()) <= 1e-6);
}

#[test]
fn infeasible_budget_is_reported() {
    let ops = lift(&small_di());
    let res = reweighted_rank_min(0.01, &ops, &SolverConfig::default());
    assert!(matches!(res, Err(Error::Infeasible { .. })));
}

#[test]
fn min_gain_scales_with_disturbance_map_when_initial_state_is_negligible() {
    // With A = 0 the initial state only affects x_0, so the gain from w is
    // homogeneous in D once D dominates.
    let z = DMatrix::zeros(2, 2);
    let eye = DMatrix::identity(2, 2);
    let spec = SystemSpec::new(z.clone(), z, eye.clone() * 3.0, eye.clone(), eye, 3, 1.0).unwrap();
    let cfg = SolverConfig::default();
    let g1 = min_achievable_gain(&lift(&spec), &cfg);
    let g2 = min_achievable_gain(&lift(&spec.with_scaled_disturbance(2.0).unwrap()), &cfg);
    assert!((g1 - 3.0).abs() < 1e-6 && (g2 - 6.0).abs() < 1e-6, "{g1} {g2}");
}
