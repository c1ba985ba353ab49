//! Causal encoder/decoder factorizations `X ≈ D·E` of block-lower-triangular
//! matrices.
//!
//! Row `k` of `E` is an encoder acting on states up to block `t_k`; column `k`
//! of `D` is a decoder active from block `t_k` on. The inner dimension (band)
//! is the number of scalar messages.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifted::{BlockLtMatrix, TOL_STRUCTURE};
use crate::linalg;
use crate::sls::Controller;

/// Absolute spectral tolerance used in place of `ε = 0`.
pub const TOL_EXACT: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFactorization", into = "RawFactorization")]
pub struct CausalFactorization {
    /// Decoder, `(T+1)n_u × r`.
    pub d: DMatrix<f64>,
    /// Encoder, `r × (T+1)n_x`.
    pub e: DMatrix<f64>,
    /// Transmission times `t_1 ≤ … ≤ t_r`.
    pub schedule: Vec<usize>,
    pub band: usize,
    pub epsilon: f64,
    /// Measured spectral norm of `X − DE`.
    pub residual_norm: f64,
    pub block_rows: usize,
    pub block_cols: usize,
}

#[derive(Serialize, Deserialize)]
struct RawFactorization {
    #[serde(rename = "D", with = "linalg::serde_matrix")]
    d: DMatrix<f64>,
    #[serde(rename = "E", with = "linalg::serde_matrix")]
    e: DMatrix<f64>,
    schedule: Vec<usize>,
    band: usize,
    epsilon: f64,
    residual_norm: f64,
    block_rows: usize,
    block_cols: usize,
    blocks: usize,
}

impl TryFrom<RawFactorization> for CausalFactorization {
    type Error = String;

    fn try_from(raw: RawFactorization) -> std::result::Result<Self, String> {
        let (m, n) = (raw.blocks * raw.block_rows, raw.blocks * raw.block_cols);
        let r = raw.band;
        // Empty nested arrays lose their other dimension.
        let d = if r == 0 { DMatrix::zeros(m, 0) } else { raw.d };
        let e = if r == 0 { DMatrix::zeros(0, n) } else { raw.e };
        if d.shape() != (m, r) || e.shape() != (r, n) || raw.schedule.len() != r {
            return Err(format!(
                "inconsistent factorization shapes: D {:?}, E {:?}, schedule {}, band {r}, expected D {m}x{r}, E {r}x{n}",
                d.shape(),
                e.shape(),
                raw.schedule.len()
            ));
        }
        Ok(CausalFactorization {
            d,
            e,
            schedule: raw.schedule,
            band: r,
            epsilon: raw.epsilon,
            residual_norm: raw.residual_norm,
            block_rows: raw.block_rows,
            block_cols: raw.block_cols,
        })
    }
}

impl From<CausalFactorization> for RawFactorization {
    fn from(f: CausalFactorization) -> Self {
        let blocks = f.blocks();
        RawFactorization {
            d: f.d,
            e: f.e,
            schedule: f.schedule,
            band: f.band,
            epsilon: f.epsilon,
            residual_norm: f.residual_norm,
            block_rows: f.block_rows,
            block_cols: f.block_cols,
            blocks,
        }
    }
}

impl CausalFactorization {
    /// Number of time blocks `T + 1`.
    pub fn blocks(&self) -> usize {
        if self.block_rows == 0 {
            0
        } else {
            self.d.nrows() / self.block_rows
        }
    }

    /// `D·E`, the zero matrix for band 0.
    pub fn product(&self) -> DMatrix<f64> {
        &self.d * &self.e
    }

    /// Number of distinct transmission times.
    pub fn distinct_times(&self) -> usize {
        let mut times = self.schedule.clone();
        times.dedup();
        times.len()
    }
}

/// First entry breaking the staircase pattern.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    /// `E_{k, τ n_x + j} ≠ 0` with `τ > t_k`.
    Encoder { k: usize, tau: usize, magnitude: f64 },
    /// `D_{t n_u + i, k} ≠ 0` with `t < t_k`.
    Decoder { k: usize, t: usize, magnitude: f64 },
    /// Schedule not sorted, out of range, or shapes inconsistent.
    Malformed(String),
}

impl Violation {
    pub fn message_index(&self) -> usize {
        match self {
            Violation::Encoder { k, .. } | Violation::Decoder { k, .. } => *k,
            Violation::Malformed(_) => 0,
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Encoder { k, tau, magnitude } => {
                write!(f, "encoder row {k} reads block {tau} after its transmission time (|entry| = {magnitude:e})")
            }
            Violation::Decoder { k, t, magnitude } => {
                write!(f, "decoder column {k} acts at block {t} before its transmission time (|entry| = {magnitude:e})")
            }
            Violation::Malformed(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CausalityCheck {
    pub ok: bool,
    /// Message indices are 1-based.
    pub violation: Option<Violation>,
}

/// Checks the staircase zero pattern of `(D, E)` against the stored schedule.
pub fn check_causality(f: &CausalFactorization, n_u: usize, n_x: usize) -> CausalityCheck {
    let fail = |v| CausalityCheck {
        ok: false,
        violation: Some(v),
    };
    let r = f.schedule.len();
    if n_u == 0 || n_x == 0 || !f.d.nrows().is_multiple_of(n_u) || !f.e.ncols().is_multiple_of(n_x) {
        return fail(Violation::Malformed("block sizes do not divide the factor dimensions".into()));
    }
    let blocks = f.d.nrows() / n_u;
    if f.e.ncols() / n_x != blocks {
        return fail(Violation::Malformed("encoder and decoder cover different horizons".into()));
    }
    if f.d.ncols() != r || f.e.nrows() != r || f.band != r {
        return fail(Violation::Malformed(format!(
            "band {} does not match D ({} cols), E ({} rows), schedule ({})",
            f.band,
            f.d.ncols(),
            f.e.nrows(),
            r
        )));
    }
    if f.schedule.windows(2).any(|w| w[0] > w[1]) {
        return fail(Violation::Malformed("schedule is not nondecreasing".into()));
    }
    if let Some(&t) = f.schedule.iter().find(|&&t| t >= blocks) {
        return fail(Violation::Malformed(format!("transmission time {t} beyond the horizon")));
    }
    for (k, &tk) in f.schedule.iter().enumerate() {
        for tau in (tk + 1)..blocks {
            let m = f.e.view((k, tau * n_x), (1, n_x)).amax();
            if m > TOL_STRUCTURE {
                return fail(Violation::Encoder {
                    k: k + 1,
                    tau,
                    magnitude: m,
                });
            }
        }
        for t in 0..tk {
            let m = f.d.view((t * n_u, k), (n_u, 1)).amax();
            if m > TOL_STRUCTURE {
                return fail(Violation::Decoder {
                    k: k + 1,
                    t,
                    magnitude: m,
                });
            }
        }
    }
    CausalityCheck {
        ok: true,
        violation: None,
    }
}

/// Number of singular values strictly above `epsilon` (at least
/// [`TOL_EXACT`], the floor the factorization itself uses); no
/// ε-factorization can have a smaller band.
pub fn band_lower_bound(x: &DMatrix<f64>, epsilon: f64) -> usize {
    let tol = epsilon.max(TOL_EXACT);
    linalg::singular_values(x).into_iter().filter(|&s| s > tol).count()
}

/// Minimum-norm least-squares coefficients of `row` in the row space of `e`.
fn row_coefficients(row: &DVector<f64>, e: &DMatrix<f64>) -> DVector<f64> {
    if e.nrows() == 0 {
        return DVector::zeros(0);
    }
    let svd = e.transpose().svd(true, true);
    let cutoff = svd.singular_values.max() * e.nrows().max(e.ncols()) as f64 * f64::EPSILON;
    svd.solve(row, cutoff).expect("both factors requested").column(0).into_owned()
}

/// Greedy row scan: each row is either expressed through the current encoder
/// rows (if the accumulated residual stays within `epsilon`) or becomes a new
/// encoder row transmitted at its own time block.
pub fn approx_causal_factorization(x: &BlockLtMatrix, epsilon: f64) -> Result<CausalFactorization> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    let tol = if epsilon == 0.0 { TOL_EXACT } else { epsilon };
    let (n_u, n_x) = (x.block_rows(), x.block_cols());
    let xm = x.data();
    let (m, n) = xm.shape();

    let mut e_rows: Vec<DVector<f64>> = Vec::new();
    let mut schedule = Vec::new();
    // Coefficients per processed row, padded later to the final band.
    let mut d_rows: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut residual = DMatrix::<f64>::zeros(m, n);
    let mut residual_frob_sq = 0.0;
    let mut residual_norm = 0.0_f64;
    let mut e = DMatrix::<f64>::zeros(0, n);

    for l in 0..m {
        let row: DVector<f64> = xm.row(l).transpose();
        if row.iter().all(|&v| v == 0.0) {
            d_rows.push(DVector::zeros(e_rows.len()));
            continue;
        }
        let coeffs = row_coefficients(&row, &e);
        let approx = if e.nrows() == 0 {
            DVector::zeros(n)
        } else {
            e.tr_mul(&coeffs)
        };
        let r_row = &row - approx;
        let frob_sq = residual_frob_sq + r_row.norm_squared();
        let accepted_norm = if frob_sq.sqrt() <= tol {
            Some(None)
        } else {
            residual.set_row(l, &r_row.transpose());
            let s = linalg::spectral_norm(&residual.rows(0, l + 1).into_owned());
            if s <= tol {
                Some(Some(s))
            } else {
                residual.row_mut(l).fill(0.0);
                None
            }
        };
        match accepted_norm {
            Some(spectral) => {
                residual.set_row(l, &r_row.transpose());
                residual_frob_sq = frob_sq;
                if let Some(s) = spectral {
                    residual_norm = s;
                }
                d_rows.push(coeffs);
            }
            None => {
                let k = e_rows.len();
                e_rows.push(row);
                schedule.push(l / n_u);
                e = DMatrix::from_fn(k + 1, n, |i, j| e_rows[i][j]);
                let mut coeffs = DVector::zeros(k + 1);
                coeffs[k] = 1.0;
                d_rows.push(coeffs);
            }
        }
    }

    let r = e_rows.len();
    let d = DMatrix::from_fn(m, r, |i, k| d_rows[i].get(k).copied().unwrap_or(0.0));
    let f = CausalFactorization {
        residual_norm: 0.0,
        d,
        e,
        schedule,
        band: r,
        epsilon,
        block_rows: n_u,
        block_cols: n_x,
    };
    // Report the exact residual of the assembled factors.
    let measured = linalg::spectral_norm(&(xm - f.product()));
    log::debug!(
        "causal factorization: band {r}, residual {measured:e} (scan estimate {:e}), tolerance {tol:e}",
        residual_norm.max(residual_frob_sq.sqrt())
    );
    Ok(CausalFactorization {
        residual_norm: measured,
        ..f
    })
}

/// Lifts an ε-factorization of `Φu` to an exact factorization of
/// `K = D E Φx^{-1}`: the decoder is kept and the encoder becomes `E Φx^{-1}`.
pub fn exact_factorization_of_k(
    f: &CausalFactorization,
    phi_x: &BlockLtMatrix,
) -> Result<(CausalFactorization, Controller)> {
    let (n_u, n_x) = (f.block_rows, f.block_cols);
    if phi_x.block_rows() != n_x || phi_x.block_cols() != n_x || phi_x.data().nrows() != f.e.ncols() {
        return Err(Error::dims(
            "phi_x",
            format!("{0}x{0} with {1}x{1} blocks", f.e.ncols(), n_x),
            format!("{:?} with {}x{} blocks", phi_x.data().shape(), phi_x.block_rows(), phi_x.block_cols()),
        ));
    }
    let e_k = if f.band == 0 {
        DMatrix::zeros(0, f.e.ncols())
    } else {
        phi_x.solve_right(&f.e)
    };
    let fk = CausalFactorization {
        d: f.d.clone(),
        e: e_k,
        schedule: f.schedule.clone(),
        band: f.band,
        epsilon: f.epsilon,
        residual_norm: 0.0,
        block_rows: n_u,
        block_cols: n_x,
    };
    let check = check_causality(&fk, n_u, n_x);
    if let Some(v) = check.violation {
        return Err(Error::CausalityViolation {
            k: v.message_index(),
            detail: v.to_string(),
        });
    }
    let k = BlockLtMatrix::from_lower(fk.product(), n_u, n_x);
    Ok((fk, Controller::new(k)))
}

/// Per-message encoder and decoder pieces of a causal factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoderController {
    pub schedule: Vec<usize>,
    /// `encoders[k][τ]` for `τ ≤ t_k`, each of length `n_x`.
    pub encoders: Vec<Vec<DVector<f64>>>,
    /// `decoders[k][t − t_k]` for `t ≥ t_k`, each of length `n_u`.
    pub decoders: Vec<Vec<DVector<f64>>>,
    pub n_u: usize,
    pub n_x: usize,
    pub blocks: usize,
}

impl EncoderDecoderController {
    pub fn from_factorization(f: &CausalFactorization) -> Result<Self> {
        let (n_u, n_x) = (f.block_rows, f.block_cols);
        let check = check_causality(f, n_u, n_x);
        if let Some(v) = check.violation {
            return Err(Error::CausalityViolation {
                k: v.message_index(),
                detail: v.to_string(),
            });
        }
        let blocks = f.blocks();
        let encoders = f
            .schedule
            .iter()
            .enumerate()
            .map(|(k, &tk)| {
                (0..=tk)
                    .map(|tau| DVector::from_iterator(n_x, f.e.view((k, tau * n_x), (1, n_x)).iter().copied()))
                    .collect()
            })
            .collect();
        let decoders = f
            .schedule
            .iter()
            .enumerate()
            .map(|(k, &tk)| (tk..blocks).map(|t| f.d.view((t * n_u, k), (n_u, 1)).column(0).into_owned()).collect())
            .collect();
        Ok(EncoderDecoderController {
            schedule: f.schedule.clone(),
            encoders,
            decoders,
            n_u,
            n_x,
            blocks,
        })
    }

    pub fn band(&self) -> usize {
        self.schedule.len()
    }

    /// Message `k` from the states observed up to its transmission time.
    pub fn encode(&self, k: usize, states: &[DVector<f64>]) -> f64 {
        self.encoders[k].iter().zip(states).map(|(e, x)| e.dot(x)).sum()
    }

    /// `u_t` from the messages received so far (`messages[k]` for `t_k ≤ t`).
    pub fn decode(&self, t: usize, messages: &[f64]) -> DVector<f64> {
        let mut u = DVector::zeros(self.n_u);
        for (k, &m) in messages.iter().enumerate() {
            let tk = self.schedule[k];
            if tk <= t {
                u.axpy(m, &self.decoders[k][t - tk], 1.0);
            }
        }
        u
    }
}
