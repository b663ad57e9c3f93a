//! Symmetric positive semidefinite matrix primitives.
//!
//! Every function that produces a symmetric matrix returns it explicitly
//! symmetrized, `(S + Sᵀ) / 2`, so rounding drift does not accumulate over
//! long recursions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Dense real matrix used throughout the crate.
pub type Mat = DMatrix<f64>;

/// Eigenvalues in `[-CLAMP_TOL·scale, 0)` are treated as rounding noise and clamped to zero.
pub const CLAMP_TOL: f64 = 1e-10;

/// Dimension above which the discrete Lyapunov solver switches from the
/// Kronecker linear solve to the doubling iteration.
pub const LYAPUNOV_DIRECT_MAX_DIM: usize = 24;

/// Result of a positive (semi)definiteness test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdCertificate {
    pub min_eigenvalue: f64,
    pub is_psd: bool,
    pub is_pd: bool,
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub(crate) fn ensure_square_finite(m: &Mat, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} has non-finite entries")));
    }
    Ok(())
}

pub(crate) fn ensure_same_dim(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!(
            "{what}: dimension mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Frobenius inner product `Tr(aᵀ b)`.
pub fn inner(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Eigendecomposition of the symmetric part of `m`; eigenvalues ascending.
pub fn sym_eigen(m: &Mat) -> (DVector<f64>, Mat) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(m).0[0]
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let (vals, _) = sym_eigen(m);
    vals[vals.len() - 1]
}

/// `U diag(f(λ)) Uᵀ` for the symmetric matrix `U diag(λ) Uᵀ`.
pub fn sym_apply(values: &DVector<f64>, vectors: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let scaled = DVector::from_iterator(values.len(), values.iter().map(|&v| f(v)));
    let mut left = vectors.clone();
    for (j, s) in scaled.iter().enumerate() {
        left.column_mut(j).scale_mut(*s);
    }
    symmetrize(&(left * vectors.transpose()))
}

fn clamp_scale(m: &Mat) -> f64 {
    CLAMP_TOL * m.norm().max(1.0)
}

/// Principal square root of a positive semidefinite matrix.
pub fn sym_sqrt(s: &Mat) -> Result<Mat> {
    ensure_square_finite(s, "sym_sqrt input")?;
    let (vals, vecs) = sym_eigen(s);
    let tol = clamp_scale(s);
    if let Some(&bad) = vals.iter().find(|&&v| v < -tol) {
        return Err(Error::InvalidInput(format!(
            "matrix is not positive semidefinite (eigenvalue {bad:e})"
        )));
    }
    Ok(sym_apply(&vals, &vecs, |v| v.max(0.0).sqrt()))
}

/// Inverse of a symmetric positive definite matrix via its eigendecomposition.
pub fn sym_inv(s: &Mat) -> Result<Mat> {
    ensure_square_finite(s, "sym_inv input")?;
    let (vals, vecs) = sym_eigen(s);
    if vals.len() > 0 && vals[0] <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "matrix is not positive definite (eigenvalue {:e})",
            vals[0]
        )));
    }
    Ok(sym_apply(&vals, &vecs, |v| 1.0 / v))
}

/// Log-determinant of a symmetric positive definite matrix, `None` if not pd.
pub fn logdet_spd(s: &Mat) -> Option<f64> {
    let (vals, _) = sym_eigen(s);
    if vals.iter().any(|&v| v <= 0.0) {
        return None;
    }
    Some(vals.iter().map(|v| v.ln()).sum())
}

/// Certificate on the symmetric matrix `m`.
pub fn certify(m: &Mat, tol: f64) -> SpdCertificate {
    let min_eigenvalue = min_eigenvalue(m);
    SpdCertificate {
        min_eigenvalue,
        is_psd: min_eigenvalue >= -tol,
        is_pd: min_eigenvalue >= tol,
    }
}

/// Loewner comparison: certificate on `a − b`.
pub fn loewner_geq(a: &Mat, b: &Mat, tol: f64) -> Result<SpdCertificate> {
    ensure_square_finite(a, "loewner_geq lhs")?;
    ensure_square_finite(b, "loewner_geq rhs")?;
    ensure_same_dim(a, b, "loewner_geq")?;
    Ok(certify(&(a - b), tol))
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius(f: &Mat) -> Result<f64> {
    ensure_square_finite(f, "spectral_radius input")?;
    if f.nrows() == 0 {
        return Ok(0.0);
    }
    let schur = nalgebra::linalg::Schur::try_new(f.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("Schur decomposition did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max))
}

/// Unique solution of `Σ = F Σ Fᵀ + Q` for Schur-stable `F`.
pub fn solve_discrete_lyapunov(f: &Mat, q: &Mat) -> Result<Mat> {
    ensure_square_finite(f, "Lyapunov F")?;
    ensure_square_finite(q, "Lyapunov Q")?;
    ensure_same_dim(f, q, "solve_discrete_lyapunov")?;
    let radius = spectral_radius(f)?;
    let bound = 1.0 - 1e-8;
    if radius >= bound {
        return Err(Error::Instability { spectral_radius: radius, bound });
    }
    let q = symmetrize(q);
    let n = f.nrows();
    let sigma = if n <= LYAPUNOV_DIRECT_MAX_DIM {
        lyapunov_kronecker(f, &q)?
    } else {
        lyapunov_doubling(f, &q)?
    };
    Ok(symmetrize(&sigma))
}

fn lyapunov_kronecker(f: &Mat, q: &Mat) -> Result<Mat> {
    let n = f.nrows();
    let system = Mat::identity(n * n, n * n) - f.kronecker(f);
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular Lyapunov system".into()))?;
    Ok(Mat::from_column_slice(n, n, sol.as_slice()))
}

fn lyapunov_doubling(f: &Mat, q: &Mat) -> Result<Mat> {
    let mut x = q.clone();
    let mut a = f.clone();
    for _ in 0..200 {
        let incr = &a * &x * a.transpose();
        x += &incr;
        if incr.norm() <= 1e-17 * (1.0 + x.norm()) {
            return Ok(x);
        }
        a = &a * &a;
    }
    Err(Error::NotConverged { what: "Lyapunov doubling", iterations: 200 })
}

/// Cholesky factorization that reports the smallest pivot instead of failing silently.
pub(crate) fn spd_inverse_checked(m: &Mat, threshold: f64) -> std::result::Result<Mat, f64> {
    let m = symmetrize(m);
    match m.clone().cholesky() {
        Some(ch) => {
            let min_pivot = ch.l_dirty().diagonal().iter().fold(f64::INFINITY, |acc, &d| acc.min(d * d));
            if min_pivot < threshold {
                Err(min_pivot)
            } else {
                Ok(symmetrize(&ch.inverse()))
            }
        }
        None => Err(0.0),
    }
}
