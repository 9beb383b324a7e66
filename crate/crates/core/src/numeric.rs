//! Dense linear-algebra kernels used by initialization and the EM updates.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt;
use faer::{Mat, Par};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Thin singular value decomposition `M = U diag(S) Vᵀ` of a tall matrix.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// `rows × cols`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Non-negative, descending.
    pub s: DVector<f64>,
    /// `cols × cols`, orthogonal.
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.s) * self.v.transpose()
    }
}

/// Thin SVD of a `rows × cols` matrix with `rows >= cols`.
pub fn thin_svd(m: &DMatrix<f64>) -> Result<ThinSvd> {
    if m.nrows() < m.ncols() {
        return Err(Error::Dimension(format!(
            "thin SVD needs rows >= cols, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("SVD input"));
    }
    // nalgebra's `SVD::new` returns singular values sorted in descending order.
    let svd = nalgebra::linalg::SVD::new(m.clone(), true, true);
    let u = svd.u.ok_or_else(|| Error::non_finite("SVD did not produce U"))?;
    let v_t = svd.v_t.ok_or_else(|| Error::non_finite("SVD did not produce V"))?;
    Ok(ThinSvd {
        u,
        s: svd.singular_values,
        v: v_t.transpose(),
    })
}

/// Orthogonal polar factor `U Vᵀ` of a tall matrix, i.e. the orthonormal
/// matrix maximizing `tr(Oᵀ M)`.
pub fn polar_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = thin_svd(m)?;
    Ok(&svd.u * svd.v.transpose())
}

/// Solves `(G + λI) x = b` for symmetric positive semi-definite `G` by a
/// Cholesky factorization. Only the lower triangle of `G` is read.
pub fn ridge_solve(g: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let n = g.nrows();
    if g.ncols() != n || b.len() != n {
        return Err(Error::Dimension(format!(
            "ridge system {}x{} with right-hand side of length {}",
            g.nrows(),
            g.ncols(),
            b.len()
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("ridge strength must be >= 0, got {lambda}")));
    }
    let mut factor = Mat::<f64>::from_fn(n, n, |i, j| {
        if i >= j {
            g[(i, j)] + if i == j { lambda } else { 0.0 }
        } else {
            0.0
        }
    });
    let mut rhs = Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
    ridge_solve_in_place(&mut factor, &mut rhs)?;
    Ok(DVector::from_fn(n, |i, _| rhs[(i, 0)]))
}

/// Factorizes the (already regularized) lower triangle of `a` in place and
/// overwrites `rhs` with the solution. Runs sequentially so results do not
/// depend on thread scheduling.
pub(crate) fn ridge_solve_in_place(a: &mut Mat<f64>, rhs: &mut Mat<f64>) -> Result<()> {
    let n = a.nrows();
    if n == 0 {
        return Ok(());
    }
    if (0..n).any(|j| (j..n).any(|i| !a[(i, j)].is_finite())) {
        return Err(Error::non_finite("ridge system matrix"));
    }
    let par = Par::Seq;
    let mut buf = MemBuffer::new(llt::factor::cholesky_in_place_scratch::<f64>(
        n,
        par,
        Default::default(),
    ));
    llt::factor::cholesky_in_place(
        a.as_mut(),
        Default::default(),
        par,
        MemStack::new(&mut buf),
        Default::default(),
    )
    .map_err(|e| match e {
        llt::factor::LltError::NonPositivePivot { index } => Error::Factorization { pivot: index },
    })?;
    let mut buf = MemBuffer::new(llt::solve::solve_in_place_scratch::<f64>(n, rhs.ncols(), par));
    llt::solve::solve_in_place(a.as_ref(), rhs.as_mut(), par, MemStack::new(&mut buf));
    Ok(())
}

/// Principal components of column-centered data.
#[derive(Debug, Clone)]
pub struct Pca {
    /// `d_X × d_Z`, orthonormal, each column's largest-magnitude entry positive.
    pub loadings: DMatrix<f64>,
    /// All eigenvalues of the (1/N) sample covariance, descending.
    pub variances: Vec<f64>,
    pub mean: DVector<f64>,
}

impl Pca {
    /// Average variance left outside the leading `d_z` directions.
    pub fn residual_variance(&self) -> Option<f64> {
        let d_z = self.loadings.ncols();
        let rest = &self.variances[d_z..];
        (!rest.is_empty()).then(|| rest.iter().sum::<f64>() / rest.len() as f64)
    }
}

pub fn pca(x: &DMatrix<f64>, d_z: usize) -> Result<Pca> {
    let (n, d_x) = x.shape();
    if d_z == 0 || d_z > n.min(d_x) {
        return Err(Error::Dimension(format!(
            "cannot extract {d_z} components from a {n}x{d_x} matrix"
        )));
    }
    if n <= d_z {
        return Err(Error::Dimension(format!(
            "PCA needs more rows ({n}) than components ({d_z})"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("PCA input"));
    }
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / n as f64;
    let eig = nalgebra::linalg::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d_x).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut loadings = DMatrix::zeros(d_x, d_z);
    for (c, &k) in order.iter().take(d_z).enumerate() {
        let mut col = eig.eigenvectors.column(k).into_owned();
        let pivot = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        loadings.set_column(c, &col);
    }
    let variances = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    Ok(Pca {
        loadings,
        variances,
        mean,
    })
}

/// Top-`d_z` principal directions of column-centered `x`.
pub fn pca_loadings(x: &DMatrix<f64>, d_z: usize) -> Result<DMatrix<f64>> {
    pca(x, d_z).map(|p| p.loadings)
}

/// Largest absolute entry of `OᵀO − I`.
pub fn orthonormality_error(o: &DMatrix<f64>) -> f64 {
    let gram = o.tr_mul(o);
    let n = gram.nrows();
    (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (gram[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn svd_unit_column() {
        let m = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let svd = thin_svd(&m).unwrap();
        assert_abs_diff_eq!(svd.s[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!((svd.u[(0, 0)] * svd.v[(0, 0)]), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(svd.u[(1, 0)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn svd_rank_one_by_hand() {
        // [[3],[4]] = (0.6, 0.8)ᵀ · 5 · 1
        let m = DMatrix::from_column_slice(2, 1, &[3.0, 4.0]);
        let svd = thin_svd(&m).unwrap();
        let sign = svd.v[(0, 0)].signum();
        assert_abs_diff_eq!(svd.s[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(svd.u[(0, 0)] * sign, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(svd.u[(1, 0)] * sign, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(svd.v[(0, 0)].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn svd_reconstructs_random() {
        let m = randn(10, 3, 1);
        let svd = thin_svd(&m).unwrap();
        assert!((svd.reconstruct() - &m).norm() / m.norm() < 1e-8);
        assert!(orthonormality_error(&svd.u) < 1e-10);
        assert!(orthonormality_error(&svd.v) < 1e-10);
    }

    #[test]
    fn svd_rejects_bad_input() {
        let mut m = randn(4, 2, 2);
        m[(1, 1)] = f64::NAN;
        assert!(matches!(thin_svd(&m), Err(Error::NonFinite { .. })));
        assert!(matches!(thin_svd(&randn(2, 3, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn ridge_diagonal_systems() {
        let x = ridge_solve(&DMatrix::identity(2, 2), &DVector::from_vec(vec![2.0, 4.0]), 1.0)
            .unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-14);
        let x = ridge_solve(&DMatrix::zeros(1, 1), &DVector::from_vec(vec![1.0]), 0.5).unwrap();
        assert_abs_diff_eq!(x[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn ridge_singular_without_regularization_fails() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = ridge_solve(&g, &DVector::from_vec(vec![1.0, 1.0]), 0.0).unwrap_err();
        assert!(matches!(err, Error::Factorization { .. }));
    }

    #[test]
    fn ridge_random_spd_residual() {
        let a = randn(30, 12, 4);
        let g = a.tr_mul(&a);
        let b = DVector::from_fn(12, |i, _| (i as f64).sin());
        for lambda in [0.0, 1e-3, 10.0] {
            let x = ridge_solve(&g, &b, lambda).unwrap();
            let lhs = (&g + DMatrix::identity(12, 12) * lambda) * &x;
            assert!((lhs - &b).norm() / b.norm() < 1e-10);
        }
    }

    #[test]
    fn pca_single_direction() {
        let mut x = DMatrix::zeros(6, 3);
        for i in 0..6 {
            x[(i, 0)] = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let l = pca_loadings(&x, 1).unwrap();
        assert_abs_diff_eq!(l[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l[(1, 0)].abs() + l[(2, 0)].abs(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pca_recovers_noiseless_subspace() {
        let a = polar_factor(&randn(12, 3, 5)).unwrap();
        let z = randn(200, 3, 6);
        let x = &z * a.transpose();
        let l = pca_loadings(&x, 3).unwrap();
        assert!(orthonormality_error(&l) < 1e-10);
        // All principal angles zero ⇔ all singular values of LᵀA equal one.
        let cosines = thin_svd(&l.tr_mul(&a)).unwrap().s;
        for c in cosines.iter() {
            assert!((1.0 - c).abs() < 1e-10, "cosine {c}");
        }
    }

    #[test]
    fn pca_rejects_too_many_components() {
        assert!(pca_loadings(&randn(5, 3, 7), 4).is_err());
        assert!(pca_loadings(&randn(2, 3, 7), 2).is_err());
    }

    proptest! {
        #[test]
        fn singular_values_sorted_nonnegative(seed in 0u64..500, rows in 1usize..9, extra in 0usize..5) {
            let m = randn(rows + extra, rows, seed);
            let s = thin_svd(&m).unwrap().s;
            prop_assert!(s.iter().all(|&v| v >= 0.0));
            prop_assert!(s.as_slice().windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn pca_invariant_to_row_permutation(seed in 0u64..200, shift in 1usize..39) {
            let x = randn(40, 6, seed);
            let permuted = DMatrix::from_fn(40, 6, |i, j| x[((i + shift) % 40, j)]);
            let a = pca_loadings(&x, 3).unwrap();
            let b = pca_loadings(&permuted, 3).unwrap();
            prop_assert!((a - b).amax() < 1e-8);
        }
    }
}
