//! Low-communication state-feedback synthesis for finite-horizon linear
//! systems.
//!
//! A closed-loop response is designed with a low numerical rank, factored into
//! a causal encoder/decoder pair, and implemented as a controller whose exact
//! L2 gain stays within the requested bound. The band of the factorization is
//! the number of scalar messages sent from sensor to actuator.

pub mod error;
pub mod factorization;
pub mod lifted;
pub mod linalg;
pub mod pipeline;
pub mod rankmin;
pub mod robustness;
pub mod sls;

pub use error::{Error, Result};
pub use factorization::{
    approx_causal_factorization, band_lower_bound, check_causality, exact_factorization_of_k, CausalFactorization,
    EncoderDecoderController,
};
pub use lifted::{assert_blt, build_block_downshift, lift, BlockLtMatrix, LiftedOperators, SystemSpec};
pub use pipeline::{
    benchmark_double_integrator, simulate_encoder_decoder, sweep_epsilon, sweep_gamma, synthesize, MessageTrace,
    SynthesisResult,
};
pub use rankmin::{
    min_achievable_gain, numerical_rank, reweighted_rank_min, solve_weighted_nuclear, SolveDiagnostics, SolverConfig,
};
pub use robustness::{gamma_eps, verify_guarantee, RobustBudget, VerifyReport};
pub use sls::{Controller, SystemResponse, Trajectory};
