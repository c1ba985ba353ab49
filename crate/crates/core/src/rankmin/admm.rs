//! Consensus ADMM over block-lower-triangular matrices.
//!
//! Solves `min Σ_i f_i(L_i X R_i + C_i)` over `X` restricted to a
//! block-lower-triangular support, where each `f_i` has a cheap proximal
//! operator on singular values. The `X`-update is a least-squares problem on
//! the support whose normal matrix does not depend on the penalty `ρ`, so it
//! is factored once per solve.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::linalg::{self, ThinSvd};

/// Singular-value proximal operators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Prox {
    /// `‖·‖_*`: soft-threshold singular values by `1/ρ`.
    NuclearNorm,
    /// Indicator of `{‖·‖ ≤ radius}`: clip singular values.
    SpectralBall { radius: f64 },
    /// `‖·‖`: prox of the largest singular value.
    SpectralNorm,
}

/// One term `f(L X R + C)`; `right = None` means the identity.
#[derive(Debug, Clone)]
pub(crate) struct Term {
    pub left: DMatrix<f64>,
    pub right: Option<DMatrix<f64>>,
    pub offset: DMatrix<f64>,
    pub prox: Prox,
}

impl Term {
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let lx = &self.left * x;
        match &self.right {
            Some(r) => lx * r + &self.offset,
            None => lx + &self.offset,
        }
    }

    /// `Lᵀ M Rᵀ`
    fn adjoint(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let lm = self.left.tr_mul(m);
        match &self.right {
            Some(r) => lm * r.transpose(),
            None => lm,
        }
    }
}

/// Entries allowed to be nonzero, column-major.
#[derive(Debug, Clone)]
pub(crate) struct Support {
    pub rows: usize,
    pub cols: usize,
    /// For each column, the first row in the support (rows below are all in).
    first_row: Vec<usize>,
    offsets: Vec<usize>,
    len: usize,
}

impl Support {
    pub fn block_lower(blocks: usize, block_rows: usize, block_cols: usize) -> Self {
        let rows = blocks * block_rows;
        let cols = blocks * block_cols;
        let first_row: Vec<usize> = (0..cols).map(|j| (j / block_cols) * block_rows).collect();
        let mut offsets = Vec::with_capacity(cols);
        let mut len = 0;
        for &f in &first_row {
            offsets.push(len);
            len += rows - f;
        }
        Support {
            rows,
            cols,
            first_row,
            offsets,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    fn gather(&self, m: &DMatrix<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(self.len);
        for j in 0..self.cols {
            let f = self.first_row[j];
            let n = self.rows - f;
            v.rows_mut(self.offsets[j], n).copy_from(&m.view((f, j), (n, 1)));
        }
        v
    }

    fn scatter(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for j in 0..self.cols {
            let f = self.first_row[j];
            let n = self.rows - f;
            m.view_mut((f, j), (n, 1)).copy_from(&v.rows(self.offsets[j], n));
        }
        m
    }

    pub fn project(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for j in 0..self.cols {
            out.view_mut((0, j), (self.first_row[j], 1)).fill(0.0);
        }
        out
    }
}

/// Factored normal equations of the `X`-update.
enum NormalSolver {
    /// Every term has `R = I`: the system decouples over columns.
    PerColumn(Vec<Cholesky<f64, Dyn>>),
    Dense(Cholesky<f64, Dyn>),
}

impl NormalSolver {
    fn new(support: &Support, terms: &[Term], proximal: f64) -> Self {
        let grams: Vec<DMatrix<f64>> = terms.iter().map(|t| t.left.tr_mul(&t.left)).collect();
        if terms.iter().all(|t| t.right.is_none()) {
            let mut total = grams.iter().fold(DMatrix::zeros(support.rows, support.rows), |acc, g| acc + g);
            for i in 0..support.rows {
                total[(i, i)] += proximal;
            }
            let per_col = (0..support.cols)
                .map(|j| {
                    let f = support.first_row[j];
                    let n = support.rows - f;
                    let sub = total.view((f, f), (n, n)).into_owned();
                    Cholesky::new(sub).expect("normal matrix is positive definite")
                })
                .collect();
            return NormalSolver::PerColumn(per_col);
        }

        let rights: Vec<Option<DMatrix<f64>>> = terms
            .iter()
            .map(|t| t.right.as_ref().map(|r| r * r.transpose()))
            .collect();
        let s = support.len();
        let mut n = DMatrix::<f64>::zeros(s, s);
        // Column-major support entries: entry (i, j) sits at offsets[j] + i - first_row[j].
        for l in 0..support.cols {
            let fl = support.first_row[l];
            for j in 0..support.cols {
                let fj = support.first_row[j];
                for (gram, right) in grams.iter().zip(&rights) {
                    let weight = match right {
                        Some(rr) => rr[(j, l)],
                        None if j == l => 1.0,
                        None => continue,
                    };
                    if weight == 0.0 {
                        continue;
                    }
                    for k in fl..support.rows {
                        let b = support.offsets[l] + k - fl;
                        let mut col = n.view_mut((support.offsets[j], b), (support.rows - fj, 1));
                        col.column_mut(0)
                            .axpy(weight, &gram.view((fj, k), (support.rows - fj, 1)).column(0), 1.0);
                    }
                }
            }
        }
        for a in 0..s {
            n[(a, a)] += proximal;
        }
        NormalSolver::Dense(Cholesky::new(n).expect("normal matrix is positive definite"))
    }

    fn solve(&self, support: &Support, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            NormalSolver::Dense(chol) => {
                let mut v = support.gather(rhs);
                chol.solve_mut(&mut v);
                support.scatter(&v)
            }
            NormalSolver::PerColumn(chols) => {
                let mut out = DMatrix::zeros(support.rows, support.cols);
                for (j, chol) in chols.iter().enumerate() {
                    let f = support.first_row[j];
                    let n = support.rows - f;
                    let mut v = rhs.view((f, j), (n, 1)).column(0).into_owned();
                    chol.solve_mut(&mut v);
                    out.view_mut((f, j), (n, 1)).copy_from(&v);
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AdmmSettings {
    pub rho: f64,
    pub max_iters: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
    /// Weight of `‖X − X_k‖²/2` added to the `X`-update.
    pub proximal: f64,
    /// Over-relaxation factor in `(0, 2)`; 1 is plain ADMM.
    pub relaxation: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct AdmmOutcome {
    pub x: DMatrix<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
    pub rho: f64,
}

/// Iterate of the splitting, kept so a solve can be resumed after the
/// problem data changes slightly (e.g. a tighter ball radius).
#[derive(Debug, Clone)]
pub(crate) struct AdmmState {
    pub x: DMatrix<f64>,
    ys: Vec<DMatrix<f64>>,
    us: Vec<DMatrix<f64>>,
    pub rho: f64,
}

fn prox(p: Prox, m: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    match p {
        Prox::NuclearNorm => {
            let svd = linalg::thin_svd(m);
            let t = 1.0 / rho;
            shrink(&svd, |s| (s - t).max(0.0))
        }
        Prox::SpectralBall { radius } => {
            let svd = linalg::thin_svd(m);
            if svd.s.first().is_none_or(|&s| s <= radius) {
                return m.clone();
            }
            shrink(&svd, |s| s.min(radius))
        }
        Prox::SpectralNorm => {
            let svd = linalg::thin_svd(m);
            let cap = spectral_prox_level(&svd.s, 1.0 / rho);
            shrink(&svd, |s| s.min(cap))
        }
    }
}

fn shrink(svd: &ThinSvd, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    linalg::map_singular_values(svd, f)
}

/// Level `c` with `Σ max(σ_i − c, 0) = t` (σ sorted decreasing), or 0 when
/// `Σ σ_i ≤ t`.
pub(crate) fn spectral_prox_level(s: &[f64], t: f64) -> f64 {
    let mut cum = 0.0;
    for (k, &sk) in s.iter().enumerate() {
        cum += sk;
        let c = (cum - t) / (k + 1) as f64;
        let next = s.get(k + 1).copied().unwrap_or(0.0);
        if c >= next {
            return c.max(0.0);
        }
    }
    0.0
}

pub(crate) struct Admm<'a> {
    support: &'a Support,
    pub terms: Vec<Term>,
    normal: NormalSolver,
    settings: AdmmSettings,
}

impl<'a> Admm<'a> {
    pub fn new(support: &'a Support, terms: Vec<Term>, settings: AdmmSettings) -> Self {
        let normal = NormalSolver::new(support, &terms, settings.proximal);
        Admm {
            support,
            terms,
            normal,
            settings,
        }
    }

    /// Starts from `warm_start` with zero scaled duals.
    pub fn start(&self, warm_start: &DMatrix<f64>) -> AdmmState {
        let x = self.support.project(warm_start);
        let rho = self.settings.rho;
        let ys = self
            .terms
            .iter()
            .map(|t| match t.prox {
                Prox::NuclearNorm => t.apply(&x),
                _ => prox(t.prox, &t.apply(&x), rho),
            })
            .collect::<Vec<_>>();
        let us = ys.iter().map(|y| DMatrix::zeros(y.nrows(), y.ncols())).collect();
        AdmmState { x, ys, us, rho }
    }

    pub fn run(&self, state: &mut AdmmState) -> AdmmOutcome {
        let support = self.support;
        let settings = &self.settings;
        let alpha = settings.relaxation;
        let AdmmState { x, ys, us, rho } = state;

        let mut primal = f64::INFINITY;
        let mut dual = f64::INFINITY;
        let mut iterations = 0;
        let mut converged = false;

        for it in 1..=settings.max_iters {
            iterations = it;
            let mut rhs = &*x * settings.proximal;
            for ((t, y), u) in self.terms.iter().zip(ys.iter()).zip(us.iter()) {
                rhs += t.adjoint(&(y - u - &t.offset));
            }
            *x = self.normal.solve(support, &rhs);

            let mut primal_sq = 0.0;
            let mut scale_ax = 0.0_f64;
            let mut scale_y = 0.0_f64;
            let mut dual_acc = DMatrix::zeros(support.rows, support.cols);
            let mut dual_scale = DMatrix::zeros(support.rows, support.cols);
            for ((t, y), u) in self.terms.iter().zip(ys.iter_mut()).zip(us.iter_mut()) {
                let ax = t.apply(x);
                let ax_hat = if alpha == 1.0 { ax.clone() } else { &ax * alpha + &*y * (1.0 - alpha) };
                let y_new = prox(t.prox, &(&ax_hat + &*u), *rho);
                primal_sq += (&ax - &y_new).norm_squared();
                scale_ax = scale_ax.max((&ax - &t.offset).norm());
                scale_y = scale_y.max((&y_new - &t.offset).norm());
                dual_acc += t.adjoint(&(&y_new - &*y));
                *u += &ax_hat - &y_new;
                dual_scale += t.adjoint(u);
                *y = y_new;
            }
            primal = primal_sq.sqrt();
            dual = *rho * support.project(&dual_acc).norm();
            let dual_ref = *rho * support.project(&dual_scale).norm();

            let eps_primal = settings.tol_primal * (1.0 + scale_ax.max(scale_y));
            let eps_dual = settings.tol_dual * (1.0 + dual_ref);
            if primal <= eps_primal && dual <= eps_dual {
                converged = true;
                break;
            }
            if it % 10 == 0 {
                let (rp, rd) = (primal / eps_primal, dual / eps_dual);
                if rp > 10.0 * rd {
                    *rho *= 2.0;
                    us.iter_mut().for_each(|u| *u *= 0.5);
                } else if rd > 10.0 * rp {
                    *rho *= 0.5;
                    us.iter_mut().for_each(|u| *u *= 2.0);
                }
            }
        }

        AdmmOutcome {
            x: support.project(x),
            iterations,
            primal_residual: primal,
            dual_residual: dual,
            converged,
            rho: *rho,
        }
    }
}

pub(crate) fn solve(
    support: &Support,
    terms: &[Term],
    settings: &AdmmSettings,
    warm_start: &DMatrix<f64>,
) -> AdmmOutcome {
    let admm = Admm::new(support, terms.to_vec(), *settings);
    let mut state = admm.start(warm_start);
    admm.run(&mut state)
}
