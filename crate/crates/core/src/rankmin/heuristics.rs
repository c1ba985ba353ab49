//! Weight-update strategies for the reweighted nuclear-norm loop, selectable by name.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Left and right weights of the objective `‖W_left · Φu · W_right‖_*`.
#[derive(Debug, Clone)]
pub struct Weights {
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
}

impl Weights {
    pub fn identity(rows: usize, cols: usize) -> Self {
        Weights {
            left: DMatrix::identity(rows, rows),
            right: DMatrix::identity(cols, cols),
        }
    }

    pub fn is_identity(&self) -> bool {
        let (r, c) = (self.left.nrows(), self.right.nrows());
        self.left == DMatrix::identity(r, r) && self.right == DMatrix::identity(c, c)
    }
}

/// A rank heuristic: how the objective weights evolve between convex rounds.
pub trait RankHeuristic: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    /// Number of convex rounds to run given the configured reweighting budget.
    fn rounds(&self, reweight_iters: usize) -> usize {
        reweight_iters
    }

    /// Weights for the round following the one that produced `phi_u`.
    fn next_weights(&self, phi_u: &DMatrix<f64>, delta: f64) -> Weights;
}

/// Plain nuclear-norm minimization: one round with identity weights.
pub struct NuclearNorm;

impl RankHeuristic for NuclearNorm {
    fn name(&self) -> &'static str {
        "nuclear"
    }

    fn description(&self) -> &'static str {
        "single round of unweighted nuclear-norm minimization"
    }

    fn rounds(&self, _reweight_iters: usize) -> usize {
        1
    }

    fn next_weights(&self, phi_u: &DMatrix<f64>, _delta: f64) -> Weights {
        Weights::identity(phi_u.nrows(), phi_u.ncols())
    }
}

/// Two-sided log-det reweighting: `W_l = (UΣUᵀ + δI)^{-1/2}`, `W_r = (VΣVᵀ + δI)^{-1/2}`.
pub struct Reweighted;

impl RankHeuristic for Reweighted {
    fn name(&self) -> &'static str {
        "reweighted"
    }

    fn description(&self) -> &'static str {
        "two-sided reweighted nuclear norm (row and column weights from the previous iterate)"
    }

    fn next_weights(&self, phi_u: &DMatrix<f64>, delta: f64) -> Weights {
        let svd = linalg::thin_svd(phi_u);
        let v = svd.v_t.transpose();
        Weights {
            left: linalg::shifted_inverse_sqrt(&svd.u, &svd.s, delta, phi_u.nrows()),
            right: linalg::shifted_inverse_sqrt(&v, &svd.s, delta, phi_u.ncols()),
        }
    }
}

/// Row-space only reweighting: `W_l = (UΣUᵀ + δI)^{-1/2}`, `W_r = I`.
pub struct ReweightedLeft;

impl RankHeuristic for ReweightedLeft {
    fn name(&self) -> &'static str {
        "reweighted-left"
    }

    fn description(&self) -> &'static str {
        "one-sided reweighted nuclear norm (left weights only)"
    }

    fn next_weights(&self, phi_u: &DMatrix<f64>, delta: f64) -> Weights {
        let svd = linalg::thin_svd(phi_u);
        Weights {
            left: linalg::shifted_inverse_sqrt(&svd.u, &svd.s, delta, phi_u.nrows()),
            right: DMatrix::identity(phi_u.ncols(), phi_u.ncols()),
        }
    }
}

#[derive(Default)]
pub struct HeuristicRegistry {
    entries: BTreeMap<&'static str, Box<dyn RankHeuristic>>,
}

impl HeuristicRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        reg.register(Box::new(NuclearNorm));
        reg.register(Box::new(Reweighted));
        reg.register(Box::new(ReweightedLeft));
        reg
    }

    /// Registers a heuristic, replacing any previous one with the same name.
    pub fn register(&mut self, h: Box<dyn RankHeuristic>) {
        self.entries.insert(h.name(), h);
    }

    pub fn get(&self, name: &str) -> Result<&dyn RankHeuristic> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownHeuristic(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

pub fn builtin() -> &'static HeuristicRegistry {
    static REGISTRY: OnceLock<HeuristicRegistry> = OnceLock::new();
    REGISTRY.get_or_init(HeuristicRegistry::with_builtins)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_registered() {
        let names: Vec<_> = builtin().names().collect();
        assert_eq!(names, vec!["nuclear", "reweighted", "reweighted-left"]);
        assert!(matches!(builtin().get("bogus"), Err(Error::UnknownHeuristic(_))));
    }

    #[test]
    fn reweighting_zero_matrix_gives_scaled_identity() {
        let w = Reweighted.next_weights(&DMatrix::zeros(2, 3), 0.01);
        assert!((w.left - DMatrix::identity(2, 2) * 10.0).norm() < 1e-12);
        assert!((w.right - DMatrix::identity(3, 3) * 10.0).norm() < 1e-12);
    }

    #[test]
    fn left_weights_invert_row_gram() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let w = ReweightedLeft.next_weights(&x, 0.5);
        // (UΣUᵀ + δI) = diag(√5, 3) + 0.5 I for this x.
        let target = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            1.0 / (5f64.sqrt() + 0.5).sqrt(),
            1.0 / 3.5f64.sqrt(),
        ]));
        assert!((w.left - target).norm() < 1e-12);
        assert_eq!(w.right, DMatrix::identity(3, 3));
    }
}
