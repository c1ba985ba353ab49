use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparselink::lifted::{lift, BlockLtMatrix, SystemSpec};
use sparselink::linalg;
use sparselink::sls::{
    controller_from_response, response_from_controller, response_from_phi_u, simulate_closed_loop, Controller,
    TOL_AFFINE,
};

fn random_system(seed: u64) -> SystemSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_x = rng.random_range(1..=3);
    let n_u = rng.random_range(1..=2);
    let n_w = rng.random_range(1..=3);
    let horizon = rng.random_range(1..=6);
    let mut a = DMatrix::from_fn(n_x, n_x, |_, _| rng.random_range(-1.0..1.0));
    let radius = linalg::spectral_norm(&a).max(1e-3);
    a *= rng.random_range(0.3..1.4) / radius;
    let b = DMatrix::from_fn(n_x, n_u, |_, _| rng.random_range(-1.0..1.0));
    let d = DMatrix::from_fn(n_x, n_w, |_, _| rng.random_range(-1.0..1.0));
    let lq = DMatrix::from_fn(n_x, n_x, |_, _| rng.random_range(-1.0..1.0));
    let lr = DMatrix::from_fn(n_u, n_u, |_, _| rng.random_range(-1.0..1.0));
    let q = &lq * lq.transpose();
    let r = &lr * lr.transpose() + DMatrix::identity(n_u, n_u) * 0.1;
    SystemSpec::new(a, b, d, q, r, horizon, 1.0).unwrap()
}

fn random_controller(spec: &SystemSpec, seed: u64) -> Controller {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let blocks = spec.horizon() + 1;
    let k = DMatrix::from_fn(blocks * spec.n_u(), blocks * spec.n_x(), |_, _| rng.random_range(-0.8..0.8));
    Controller::new(BlockLtMatrix::from_lower(k, spec.n_u(), spec.n_x()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn controller_response_round_trip(seed in any::<u64>()) {
        let spec = random_system(seed);
        let ops = lift(&spec);
        let k = random_controller(&spec, seed);
        let resp = response_from_controller(&k, &ops);
        prop_assert!(resp.affine_residual(&ops) <= TOL_AFFINE);
        let back = controller_from_response(&resp);
        let scale = 1.0 + linalg::max_abs(k.k.data());
        prop_assert!(linalg::max_abs(&(back.k.data() - k.k.data())) <= 1e-9 * scale);

        let again = response_from_phi_u(resp.phi_u.clone(), &ops).unwrap();
        prop_assert!(again.affine_residual(&ops) <= TOL_AFFINE);
        let scale_x = 1.0 + linalg::max_abs(resp.phi_x.data());
        prop_assert!(linalg::max_abs(&(again.phi_x.data() - resp.phi_x.data())) <= 1e-9 * scale_x);
    }

    #[test]
    fn simulation_matches_response_map(seed in any::<u64>()) {
        let spec = random_system(seed);
        let ops = lift(&spec);
        let k = random_controller(&spec, seed);
        let resp = response_from_controller(&k, &ops);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(7));
        let x0 = DVector::from_fn(spec.n_x(), |_, _| rng.random_range(-1.0..1.0));
        let w: Vec<DVector<f64>> = (0..spec.horizon())
            .map(|_| DVector::from_fn(spec.n_w(), |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let traj = simulate_closed_loop(&spec, &k, &w, &x0).unwrap();
        let delta = ops.apply_disturbance(&x0, &w);
        let x = resp.phi_x.data() * &delta;
        let u = resp.phi_u.data() * &delta;
        let sim_x = linalg::stack_vectors(&traj.x);
        let sim_u = linalg::stack_vectors(&traj.u);
        let scale = 1.0 + x.norm() + u.norm();
        prop_assert!((sim_x - x).norm() <= 1e-8 * scale);
        prop_assert!((sim_u - u).norm() <= 1e-8 * scale);
    }
}
