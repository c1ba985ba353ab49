//! System-level parametrization of finite-horizon state feedback.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lifted::{BlockLtMatrix, LiftedOperators, SystemSpec};
use crate::linalg;

/// Tolerance on the affine constraint `[I − Z𝒜, −Zℬ][Φx; Φu] = I`.
pub const TOL_AFFINE: f64 = 1e-10;

/// Closed-loop maps from the stacked disturbance to stacked states and inputs.
#[derive(Debug, Clone)]
pub struct SystemResponse {
    pub phi_x: BlockLtMatrix,
    pub phi_u: BlockLtMatrix,
}

/// Causal state feedback `u = K x`, `K` being `(n_u, n_x)`-block-lower-triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub k: BlockLtMatrix,
}

impl Controller {
    pub fn new(k: BlockLtMatrix) -> Self {
        Controller { k }
    }

    pub fn zero(ops: &LiftedOperators) -> Self {
        Controller {
            k: BlockLtMatrix::zeros(ops.blocks(), ops.n_u, ops.n_x),
        }
    }
}

impl Serialize for Controller {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        linalg::serde_matrix::serialize(self.k.data(), ser)
    }
}

impl SystemResponse {
    /// Frobenius norm of `[I − Z𝒜, −Zℬ][Φx; Φu] − I`.
    pub fn affine_residual(&self, ops: &LiftedOperators) -> f64 {
        let n = ops.blocks() * ops.n_x;
        let lhs = ops.open_loop_operator().data() * self.phi_x.data()
            - ops.shifted_input() * self.phi_u.data();
        (lhs - DMatrix::identity(n, n)).norm()
    }
}

fn check_phi_u(phi_u: &BlockLtMatrix, ops: &LiftedOperators) -> Result<()> {
    if phi_u.block_rows() != ops.n_u || phi_u.block_cols() != ops.n_x || phi_u.blocks() != ops.blocks() {
        return Err(Error::dims(
            "phi_u",
            format!("({}, {}) blocks, {} block rows", ops.n_u, ops.n_x, ops.blocks()),
            format!("({}, {}) blocks, {} block rows", phi_u.block_rows(), phi_u.block_cols(), phi_u.blocks()),
        ));
    }
    Ok(())
}

/// `Φx = (I − Z𝒜)^{-1}(I + ZℬΦu)`, by block forward substitution.
pub fn phi_x_from_phi_u(phi_u: &BlockLtMatrix, ops: &LiftedOperators) -> Result<BlockLtMatrix> {
    check_phi_u(phi_u, ops)?;
    let n = ops.blocks() * ops.n_x;
    let rhs = DMatrix::identity(n, n) + ops.shifted_input() * phi_u.data();
    let phi_x = ops.open_loop_operator().solve_left(&rhs);
    Ok(BlockLtMatrix::from_lower(phi_x, ops.n_x, ops.n_x))
}

/// Response obtained by eliminating `Φx` through the affine constraint.
pub fn response_from_phi_u(phi_u: BlockLtMatrix, ops: &LiftedOperators) -> Result<SystemResponse> {
    let phi_x = phi_x_from_phi_u(&phi_u, ops)?;
    Ok(SystemResponse { phi_x, phi_u })
}

/// `blkdiag(𝒬^{1/2}, ℛ^{1/2}) [Φx; Φu] 𝒟`.
pub fn gain_matrix(resp: &SystemResponse, ops: &LiftedOperators) -> DMatrix<f64> {
    stacked_cost(resp, ops) * &ops.cal_d
}

/// `blkdiag(𝒬^{1/2}, ℛ^{1/2}) [Φx; Φu]`, the operator bounded by the robust budget.
pub fn stacked_cost(resp: &SystemResponse, ops: &LiftedOperators) -> DMatrix<f64> {
    let top = &ops.q_half * resp.phi_x.data();
    let bottom = &ops.r_half * resp.phi_u.data();
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(&top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(&bottom);
    out
}

/// Exact finite-horizon L2 gain of the closed loop realizing `resp`.
pub fn l2_gain(resp: &SystemResponse, ops: &LiftedOperators) -> f64 {
    linalg::spectral_norm(&gain_matrix(resp, ops))
}

/// `K = Φu Φx^{-1}` by block back substitution.
pub fn controller_from_response(resp: &SystemResponse) -> Controller {
    let k = resp.phi_x.solve_right(resp.phi_u.data());
    Controller {
        k: BlockLtMatrix::from_lower(k, resp.phi_u.block_rows(), resp.phi_u.block_cols()),
    }
}

/// `Φx = (I − Z(𝒜 + ℬK))^{-1}`, `Φu = KΦx`.
pub fn response_from_controller(k: &Controller, ops: &LiftedOperators) -> SystemResponse {
    let n = ops.blocks() * ops.n_x;
    let closed = &ops.cal_a + &ops.cal_b * k.k.data();
    let m = DMatrix::identity(n, n) - ops.z.data() * closed;
    let m = BlockLtMatrix::from_lower(m, ops.n_x, ops.n_x);
    let phi_x = m.solve_left(&DMatrix::identity(n, n));
    let phi_x = BlockLtMatrix::from_lower(phi_x, ops.n_x, ops.n_x);
    let phi_u = BlockLtMatrix::from_lower(k.k.data() * phi_x.data(), ops.n_u, ops.n_x);
    SystemResponse { phi_x, phi_u }
}

/// State and input trajectories `x_0..x_T`, `u_0..u_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn stacked(&self) -> DVector<f64> {
        let mut parts = self.x.clone();
        parts.extend(self.u.iter().cloned());
        linalg::stack_vectors(&parts)
    }

    /// `Σ_t x_tᵀQx_t + u_tᵀRu_t`.
    pub fn cost(&self, spec: &SystemSpec) -> f64 {
        let xs: f64 = self.x.iter().map(|x| x.dot(&(spec.q() * x))).sum();
        let us: f64 = self.u.iter().map(|u| u.dot(&(spec.r() * u))).sum();
        xs + us
    }
}

/// Rolls the dynamics forward with `u_t = Σ_{τ≤t} K_{(t,τ)} x_τ`.
pub fn simulate_closed_loop(
    spec: &SystemSpec,
    k: &Controller,
    w: &[DVector<f64>],
    x0: &DVector<f64>,
) -> Result<Trajectory> {
    let horizon = spec.horizon();
    if w.len() != horizon {
        return Err(Error::dims("disturbance sequence", horizon, w.len()));
    }
    if x0.len() != spec.n_x() {
        return Err(Error::dims("x0", spec.n_x(), x0.len()));
    }
    if let Some(bad) = w.iter().find(|wt| wt.len() != spec.n_w()) {
        return Err(Error::dims("w_t", spec.n_w(), bad.len()));
    }
    let nx = spec.n_x();
    let nu = spec.n_u();
    let mut xs: Vec<DVector<f64>> = vec![x0.clone()];
    let mut us: Vec<DVector<f64>> = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let mut ut = DVector::zeros(nu);
        for (tau, x_tau) in xs.iter().enumerate() {
            ut += k.k.data().view((t * nu, tau * nx), (nu, nx)) * x_tau;
        }
        if t < horizon {
            let next = spec.a() * &xs[t] + spec.b() * &ut + spec.d() * &w[t];
            xs.push(next);
        }
        us.push(ut);
    }
    Ok(Trajectory { x: xs, u: us })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifted::lift;

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    fn spec(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>, horizon: usize) -> SystemSpec {
        let nx = a.nrows();
        SystemSpec::new(a, b, eye(nx), q, r, horizon, 1.0).unwrap()
    }

    #[test]
    fn zero_phi_u_zero_dynamics_gives_identity() {
        let s = spec(DMatrix::zeros(2, 2), eye(2), eye(2), eye(2), 3);
        let ops = lift(&s);
        let phi_u = BlockLtMatrix::zeros(4, 2, 2);
        let phi_x = phi_x_from_phi_u(&phi_u, &ops).unwrap();
        assert_eq!(phi_x.data(), &eye(8));
    }

    #[test]
    fn zero_phi_u_is_neumann_series() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.9]);
        let s = spec(a, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), eye(2), eye(1), 4);
        let ops = lift(&s);
        let phi_x = phi_x_from_phi_u(&BlockLtMatrix::zeros(5, 1, 2), &ops).unwrap();
        let za = ops.z.data() * &ops.cal_a;
        let mut series = eye(10);
        let mut power = eye(10);
        for _ in 0..4 {
            power = &power * &za;
            series += &power;
        }
        assert!((phi_x.data() - series).norm() < 1e-12);
    }

    #[test]
    fn identity_response_gain() {
        let s = spec(DMatrix::zeros(2, 2), eye(2), eye(2), eye(2), 2);
        let ops = lift(&s);
        let resp = response_from_controller(&Controller::zero(&ops), &ops);
        let g = gain_matrix(&resp, &ops);
        let mut expected = DMatrix::zeros(12, 6);
        expected.view_mut((0, 0), (6, 6)).copy_from(&eye(6));
        assert!((g - expected).norm() < 1e-15);
        assert!((l2_gain(&resp, &ops) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_input_weight_annihilates_input_rows() {
        let s = spec(eye(2) * 0.5, eye(2), eye(2), DMatrix::zeros(2, 2), 2);
        let ops = lift(&s);
        let k = Controller::new(BlockLtMatrix::from_lower(DMatrix::from_element(6, 6, 0.3), 2, 2));
        let g = gain_matrix(&response_from_controller(&k, &ops), &ops);
        assert_eq!(g.rows(6, 6).amax(), 0.0);
    }

    #[test]
    fn scaling_disturbance_map_brackets_gain() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.1]);
        let s1 = spec(a, b, eye(2), eye(1), 3);
        let s2 = s1.with_scaled_disturbance(2.0).unwrap();
        let (o1, o2) = (lift(&s1), lift(&s2));
        let k = Controller::zero(&o1);
        let g1 = l2_gain(&response_from_controller(&k, &o1), &o1);
        let g2 = l2_gain(&response_from_controller(&k, &o2), &o2);
        // The initial-state channel is not scaled, so the gain grows by at most 2.
        assert!(g1 < g2 && g2 <= 2.0 * g1 + 1e-12);
    }

    #[test]
    fn controller_response_special_cases() {
        let s = spec(eye(2), DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), eye(2), eye(1), 2);
        let ops = lift(&s);
        let zero_u = SystemResponse {
            phi_x: phi_x_from_phi_u(&BlockLtMatrix::zeros(3, 1, 2), &ops).unwrap(),
            phi_u: BlockLtMatrix::zeros(3, 1, 2),
        };
        assert_eq!(controller_from_response(&zero_u).k.data().amax(), 0.0);

        let phi_u = BlockLtMatrix::from_lower(DMatrix::from_fn(3, 6, |i, j| (i + j) as f64), 1, 2);
        let unit = SystemResponse { phi_x: BlockLtMatrix::identity(3, 2), phi_u: phi_u.clone() };
        assert_eq!(controller_from_response(&unit).k, phi_u);
    }

    #[test]
    fn one_step_horizon_is_two_term_series() {
        let s = spec(DMatrix::zeros(2, 2), eye(2), eye(2), eye(2), 1);
        let ops = lift(&s);
        let k = Controller::new(BlockLtMatrix::from_lower(DMatrix::from_fn(4, 4, |i, j| 0.1 * (i as f64) - 0.2 * (j as f64)), 2, 2));
        let resp = response_from_controller(&k, &ops);
        let expected = eye(4) + ops.z.data() * (&ops.cal_a + &ops.cal_b * k.k.data());
        assert!((resp.phi_x.data() - expected).norm() < 1e-14);
    }

    #[test]
    fn simulation_special_cases() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let s = spec(a.clone(), DMatrix::from_row_slice(2, 1, &[0.0, 0.1]), eye(2), eye(1), 5);
        let ops = lift(&s);
        let k = Controller::new(BlockLtMatrix::from_lower(DMatrix::from_element(6, 12, -0.4), 1, 2));
        let w = vec![DVector::zeros(2); 5];
        let traj = simulate_closed_loop(&s, &k, &w, &DVector::zeros(2)).unwrap();
        assert!(traj.x.iter().chain(traj.u.iter()).all(|v| v.amax() == 0.0));

        let x0 = DVector::from_vec(vec![0.7, -1.3]);
        let traj = simulate_closed_loop(&s, &Controller::zero(&ops), &w, &x0).unwrap();
        let mut expected = x0.clone();
        for xt in &traj.x {
            assert!((xt - &expected).norm() < 1e-14);
            expected = &a * expected;
        }
    }

    #[test]
    fn simulation_rejects_wrong_lengths() {
        let s = spec(eye(1), eye(1), eye(1), eye(1), 3);
        let ops = lift(&s);
        let err = simulate_closed_loop(&s, &Controller::zero(&ops), &[DVector::zeros(1)], &DVector::zeros(1));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }
}
