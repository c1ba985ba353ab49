//! Finite-horizon lifted operators and the block-lower-triangular matrix type.
//!
//! Signals over the horizon `t = 0..=T` are stacked into tall vectors, e.g.
//! `x = [x_0; x_1; …; x_T]`. The disturbance stack is `w = [x_0; w_0; …; w_{T-1}]`,
//! so that `x = Z𝒜x + Zℬu + 𝒟w` holds for the dynamics `x_{t+1} = A x_t + B u_t + D w_t`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Absolute tolerance on upper blocks when validating user-provided matrices.
pub const TOL_STRUCTURE: f64 = 1e-12;
/// Eigenvalue floor for the PSD checks on `Q` and `R`.
pub const TOL_PSD: f64 = 1e-10;

/// A dense matrix with `blocks × blocks` blocks of size `block_rows × block_cols`,
/// all blocks strictly above the block diagonal being zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLtMatrix {
    data: DMatrix<f64>,
    block_rows: usize,
    block_cols: usize,
    blocks: usize,
}

impl BlockLtMatrix {
    /// Wraps `data`, hard-zeroing every upper block. Used for internally
    /// constructed operators whose upper part is zero in exact arithmetic.
    pub fn from_lower(mut data: DMatrix<f64>, block_rows: usize, block_cols: usize) -> Self {
        assert!(block_rows > 0 && block_cols > 0);
        assert_eq!(data.nrows() % block_rows, 0);
        assert_eq!(data.ncols() % block_cols, 0);
        let blocks = data.nrows() / block_rows;
        assert_eq!(data.ncols() / block_cols, blocks);
        for t in 0..blocks {
            for tau in (t + 1)..blocks {
                data.view_mut((t * block_rows, tau * block_cols), (block_rows, block_cols))
                    .fill(0.0);
            }
        }
        BlockLtMatrix {
            data,
            block_rows,
            block_cols,
            blocks,
        }
    }

    pub fn zeros(blocks: usize, block_rows: usize, block_cols: usize) -> Self {
        BlockLtMatrix {
            data: DMatrix::zeros(blocks * block_rows, blocks * block_cols),
            block_rows,
            block_cols,
            blocks,
        }
    }

    pub fn identity(blocks: usize, block_size: usize) -> Self {
        let n = blocks * block_size;
        BlockLtMatrix {
            data: DMatrix::identity(n, n),
            block_rows: block_size,
            block_cols: block_size,
            blocks,
        }
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    pub fn block_cols(&self) -> usize {
        self.block_cols
    }

    /// Number of block rows (= block columns), i.e. `T + 1`.
    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn block(&self, t: usize, tau: usize) -> DMatrix<f64> {
        self.data
            .view(
                (t * self.block_rows, tau * self.block_cols),
                (self.block_rows, self.block_cols),
            )
            .into_owned()
    }

    /// Block-row mask: `true` at entries allowed to be nonzero.
    pub fn is_in_support(&self, i: usize, j: usize) -> bool {
        i / self.block_rows >= j / self.block_cols
    }

    /// Solves `self · X = rhs` by block forward substitution. `self` must have
    /// square invertible diagonal blocks.
    pub fn solve_left(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.block_rows, self.block_cols);
        assert_eq!(rhs.nrows(), self.data.nrows());
        let n = self.block_rows;
        let diag_inv: Vec<Option<DMatrix<f64>>> = (0..self.blocks)
            .map(|t| {
                let d = self.block(t, t);
                if d == DMatrix::identity(n, n) {
                    None
                } else {
                    Some(d.try_inverse().expect("singular diagonal block"))
                }
            })
            .collect();
        let mut x = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for t in 0..self.blocks {
            let mut acc = rhs.rows(t * n, n).into_owned();
            for s in 0..t {
                let l = self.data.view((t * n, s * n), (n, n));
                acc -= l * x.rows(s * n, n);
            }
            let xt = match &diag_inv[t] {
                Some(inv) => inv * acc,
                None => acc,
            };
            x.rows_mut(t * n, n).copy_from(&xt);
        }
        x
    }

    /// Solves `X · self = rhs` by block back substitution over column blocks.
    pub fn solve_right(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.block_rows, self.block_cols);
        assert_eq!(rhs.ncols(), self.data.ncols());
        let n = self.block_rows;
        let mut x = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for tau in (0..self.blocks).rev() {
            let mut acc = rhs.columns(tau * n, n).into_owned();
            for s in (tau + 1)..self.blocks {
                let l = self.data.view((s * n, tau * n), (n, n));
                acc -= x.columns(s * n, n) * l;
            }
            let d = self.block(tau, tau);
            let xt = if d == DMatrix::identity(n, n) {
                acc
            } else {
                acc * d.try_inverse().expect("singular diagonal block")
            };
            x.columns_mut(tau * n, n).copy_from(&xt);
        }
        x
    }
}

/// Validates that `m` is `(block_rows, block_cols)`-block-lower-triangular up
/// to [`TOL_STRUCTURE`] and wraps it. Upper blocks are zeroed on acceptance.
pub fn assert_blt(m: &DMatrix<f64>, block_rows: usize, block_cols: usize) -> Result<BlockLtMatrix> {
    if block_rows == 0 || block_cols == 0 {
        return Err(Error::dims("assert_blt", "positive block sizes", format!("({block_rows}, {block_cols})")));
    }
    if !m.nrows().is_multiple_of(block_rows)
        || !m.ncols().is_multiple_of(block_cols)
        || m.nrows() / block_rows != m.ncols() / block_cols
    {
        return Err(Error::dims(
            "assert_blt",
            format!("equal block counts for block sizes ({block_rows}, {block_cols})"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    let blocks = m.nrows() / block_rows;
    for t in 0..blocks {
        for tau in (t + 1)..blocks {
            let b = m.view((t * block_rows, tau * block_cols), (block_rows, block_cols));
            let mag = b.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            if mag > TOL_STRUCTURE {
                return Err(Error::NotBlockLowerTriangular {
                    block_row: t,
                    block_col: tau,
                    magnitude: mag,
                });
            }
        }
    }
    Ok(BlockLtMatrix::from_lower(m.clone(), block_rows, block_cols))
}

/// Block-downshift operator with identity blocks of size `n` on the first block
/// subdiagonal, `(T+1)n` square.
pub fn build_block_downshift(horizon: usize, n: usize) -> BlockLtMatrix {
    let blocks = horizon + 1;
    let mut z = DMatrix::zeros(blocks * n, blocks * n);
    for t in 1..blocks {
        z.view_mut((t * n, (t - 1) * n), (n, n))
            .fill_with_identity();
    }
    BlockLtMatrix::from_lower(z, n, n)
}

/// Horizon-`T` problem data for `x_{t+1} = A x_t + B u_t + D w_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSystemSpec", into = "RawSystemSpec")]
pub struct SystemSpec {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    horizon: usize,
    gamma: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystemSpec {
    #[serde(rename = "A", with = "linalg::serde_matrix")]
    a: DMatrix<f64>,
    #[serde(rename = "B", with = "linalg::serde_matrix")]
    b: DMatrix<f64>,
    #[serde(rename = "D", with = "linalg::serde_matrix")]
    d: DMatrix<f64>,
    #[serde(rename = "Q", with = "linalg::serde_matrix")]
    q: DMatrix<f64>,
    #[serde(rename = "R", with = "linalg::serde_matrix")]
    r: DMatrix<f64>,
    #[serde(rename = "T")]
    horizon: usize,
    gamma: f64,
}

impl TryFrom<RawSystemSpec> for SystemSpec {
    type Error = Error;

    fn try_from(raw: RawSystemSpec) -> Result<Self> {
        SystemSpec::new(raw.a, raw.b, raw.d, raw.q, raw.r, raw.horizon, raw.gamma)
    }
}

impl From<SystemSpec> for RawSystemSpec {
    fn from(s: SystemSpec) -> Self {
        RawSystemSpec {
            a: s.a,
            b: s.b,
            d: s.d,
            q: s.q,
            r: s.r,
            horizon: s.horizon,
            gamma: s.gamma,
        }
    }
}

impl SystemSpec {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        horizon: usize,
        gamma: f64,
    ) -> Result<Self> {
        let nx = a.nrows();
        if nx == 0 || a.ncols() != nx {
            return Err(Error::dims("A", "nonempty square matrix", format!("{}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != nx || b.ncols() == 0 {
            return Err(Error::dims("B", format!("{nx} rows, at least one column"), format!("{}x{}", b.nrows(), b.ncols())));
        }
        if d.nrows() != nx || d.ncols() == 0 {
            return Err(Error::dims("D", format!("{nx} rows, at least one column"), format!("{}x{}", d.nrows(), d.ncols())));
        }
        let nu = b.ncols();
        if q.shape() != (nx, nx) {
            return Err(Error::dims("Q", format!("{nx}x{nx}"), format!("{}x{}", q.nrows(), q.ncols())));
        }
        if r.shape() != (nu, nu) {
            return Err(Error::dims("R", format!("{nu}x{nu}"), format!("{}x{}", r.nrows(), r.ncols())));
        }
        if horizon == 0 {
            return Err(Error::InvalidSpec("horizon T must be at least 1".into()));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidSpec(format!("gamma must be a finite nonnegative number, got {gamma}")));
        }
        for (name, m) in [("A", &a), ("B", &b), ("D", &d), ("Q", &q), ("R", &r)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} has non-finite entries")));
            }
        }
        for (name, m) in [("Q", &q), ("R", &r)] {
            if (m - m.transpose()).amax() > TOL_PSD * (1.0 + m.amax()) {
                return Err(Error::InvalidSpec(format!("{name} is not symmetric")));
            }
            let min_eig = linalg::min_eigenvalue(m);
            if min_eig < -TOL_PSD {
                return Err(Error::NotPositiveSemidefinite {
                    name: name.to_string(),
                    min_eigenvalue: min_eig,
                });
            }
        }
        Ok(SystemSpec { a, b, d, q, r, horizon, gamma })
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_w(&self) -> usize {
        self.d.ncols()
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        SystemSpec::new(
            self.a.clone(),
            self.b.clone(),
            self.d.clone(),
            self.q.clone(),
            self.r.clone(),
            self.horizon,
            gamma,
        )
    }

    /// Same system with the disturbance map scaled by `c`.
    pub fn with_scaled_disturbance(&self, c: f64) -> Result<Self> {
        SystemSpec::new(
            self.a.clone(),
            self.b.clone(),
            &self.d * c,
            self.q.clone(),
            self.r.clone(),
            self.horizon,
            self.gamma,
        )
    }
}

/// All lifted operators for a [`SystemSpec`].
#[derive(Debug, Clone)]
pub struct LiftedOperators {
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub horizon: usize,
    /// `I_{T+1} ⊗ A`
    pub cal_a: DMatrix<f64>,
    /// `I_{T+1} ⊗ B`
    pub cal_b: DMatrix<f64>,
    /// `blkdiag(I_{n_x}, I_T ⊗ D)`
    pub cal_d: DMatrix<f64>,
    /// `I_{T+1} ⊗ Q^{1/2}`
    pub q_half: DMatrix<f64>,
    /// `I_{T+1} ⊗ R^{1/2}`
    pub r_half: DMatrix<f64>,
    pub z: BlockLtMatrix,
}

impl LiftedOperators {
    pub fn blocks(&self) -> usize {
        self.horizon + 1
    }

    /// `I - Z𝒜`, unit block-lower-triangular.
    pub fn open_loop_operator(&self) -> BlockLtMatrix {
        let n = self.blocks() * self.n_x;
        let m = DMatrix::identity(n, n) - self.z.data() * &self.cal_a;
        BlockLtMatrix::from_lower(m, self.n_x, self.n_x)
    }

    /// `Zℬ`
    pub fn shifted_input(&self) -> DMatrix<f64> {
        self.z.data() * &self.cal_b
    }

    /// `blkdiag(𝒬^{1/2}, ℛ^{1/2})`
    pub fn cost_half(&self) -> DMatrix<f64> {
        linalg::block_diag(&[&self.q_half, &self.r_half])
    }

    /// Maps a stacked disturbance `[x_0; w_0; …; w_{T-1}]` through 𝒟.
    pub fn apply_disturbance(&self, x0: &DVector<f64>, w: &[DVector<f64>]) -> DVector<f64> {
        let mut parts = vec![x0.clone()];
        parts.extend(w.iter().cloned());
        &self.cal_d * linalg::stack_vectors(&parts)
    }
}

pub fn lift(spec: &SystemSpec) -> LiftedOperators {
    let blocks = spec.horizon + 1;
    let nx = spec.n_x();
    let cal_a = linalg::block_diag_repeat(&spec.a, blocks);
    let cal_b = linalg::block_diag_repeat(&spec.b, blocks);
    let ix = DMatrix::identity(nx, nx);
    let tail = linalg::block_diag_repeat(&spec.d, spec.horizon);
    let cal_d = linalg::block_diag(&[&ix, &tail]);
    let q_half = linalg::block_diag_repeat(&linalg::psd_sqrt(&spec.q), blocks);
    let r_half = linalg::block_diag_repeat(&linalg::psd_sqrt(&spec.r), blocks);
    LiftedOperators {
        n_x: nx,
        n_u: spec.n_u(),
        n_w: spec.n_w(),
        horizon: spec.horizon,
        cal_a,
        cal_b,
        cal_d,
        q_half,
        r_half,
        z: build_block_downshift(spec.horizon, nx),
    }
}
