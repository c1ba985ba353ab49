//! Dense linear-algebra helpers shared by the solver, the factorization and
//! the verification code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Singular values sorted in decreasing order. Empty matrices have none.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Induced 2-norm (largest singular value); zero for empty matrices.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Number of singular values at least `rank_tol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rank_tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&v| v >= rank_tol * smax).count(),
        _ => 0,
    }
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// `I_count ⊗ block`.
pub fn block_diag_repeat(block: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    kron(&DMatrix::identity(count, count), block)
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric PSD square root with negative eigenvalues clipped at zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&vals) * v.transpose()))
}

/// `(U diag(s) Uᵀ + δ I)^{-1/2}` where `U` has orthonormal columns spanning a
/// subspace of `R^dim`. The orthogonal complement gets weight `δ^{-1/2}`.
pub fn shifted_inverse_sqrt(u: &DMatrix<f64>, s: &[f64], delta: f64, dim: usize) -> DMatrix<f64> {
    let base = 1.0 / delta.sqrt();
    let mut out = DMatrix::identity(dim, dim) * base;
    for (k, &sk) in s.iter().enumerate().take(u.ncols()) {
        let col = u.column(k);
        let coef = 1.0 / (sk.max(0.0) + delta).sqrt() - base;
        out.ger(coef, &col, &col, 1.0);
    }
    symmetrize(&out)
}

/// Thin SVD with singular values sorted in decreasing order.
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn thin_svd(m: &DMatrix<f64>) -> ThinSvd {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = order.iter().map(|&k| svd.singular_values[k]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]);
    let v_t = DMatrix::from_fn(order.len(), v_t.ncols(), |i, j| v_t[(order[i], j)]);
    ThinSvd { u, s, v_t }
}

/// Rebuild `U diag(f(s)) Vᵀ` after mapping the singular values.
pub fn map_singular_values(svd: &ThinSvd, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = svd.u.clone();
    for (k, &sk) in svd.s.iter().enumerate() {
        let fk = f(sk);
        scaled.column_mut(k).scale_mut(fk);
    }
    scaled * &svd.v_t
}

/// Largest absolute entry, zero for empty matrices.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_row_major(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn stack_vectors(parts: &[DVector<f64>]) -> DVector<f64> {
    let n = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut off = 0;
    for p in parts {
        out.rows_mut(off, p.len()).copy_from(p);
        off += p.len();
    }
    out
}

pub fn serialize_vectors<S: serde::Serializer>(v: &[DVector<f64>], ser: S) -> Result<S::Ok, S::Error> {
    use serde::Serialize;
    v.iter().map(|x| x.as_slice().to_vec()).collect::<Vec<_>>().serialize(ser)
}

/// Serde adapter storing matrices as row-major nested arrays.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
        super::row_major(m).serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        super::from_row_major(&rows).ok_or_else(|| D::Error::custom("ragged matrix rows"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_rank_counts() {
        assert_eq!(numerical_rank(&DMatrix::zeros(3, 4), 1e-6), 0);
        assert_eq!(numerical_rank(&DMatrix::identity(5, 5), 1e-3), 5);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-3, 1e-9]));
        assert_eq!(numerical_rank(&d, 1e-6), 2);
    }

    #[test]
    fn psd_sqrt_of_scaled_identity() {
        let q = DMatrix::identity(3, 3) * 4.0;
        assert!((psd_sqrt(&q) - DMatrix::identity(3, 3) * 2.0).norm() < 1e-14);
    }

    #[test]
    fn shifted_inverse_sqrt_matches_eigen_route() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.0]);
        let svd = thin_svd(&m);
        let w = shifted_inverse_sqrt(&svd.u, &svd.s, 0.01, 3);
        let gram = &svd.u * DMatrix::from_diagonal(&DVector::from_vec(svd.s.clone())) * svd.u.transpose()
            + DMatrix::identity(3, 3) * 0.01;
        // w * gram * w = I
        let check = &w * gram * &w;
        assert!((check - DMatrix::identity(3, 3)).norm() < 1e-10);
    }

    #[test]
    fn thin_svd_reconstructs() {
        let m = DMatrix::from_fn(4, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let svd = thin_svd(&m);
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        assert!((map_singular_values(&svd, |s| s) - m).norm() < 1e-12);
    }
}
