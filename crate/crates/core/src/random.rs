//! Seeded random instances.
//!
//! Every experiment and test draws from [`ChaCha20Rng`], whose output stream is
//! specified independently of platform and word size.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::lqg::{CovarianceProfile, SystemInstance};
use crate::matops::{symmetrize, Mat};

pub use rand_chacha::ChaCha20Rng as InstanceRng;

/// Identifier written to run metadata.
pub const RNG_ID: &str = "chacha20 (rand_chacha 0.9, seed_from_u64)";

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Haar-distributed orthogonal matrix: Q factor of a Gaussian matrix with the
/// column signs fixed so that R has a positive diagonal.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Mat {
    let qr = gaussian_matrix(rng, d, d).qr();
    let (mut q, r) = qr.unpack();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `U diag(λ) Uᵀ` with `U` Haar and `λ` drawn uniformly from `[lo, hi]`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, d: usize, lo: f64, hi: f64) -> Mat {
    let u = random_orthogonal(rng, d);
    let lambda: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
    let diag = Mat::from_diagonal(&nalgebra::DVector::from_vec(lambda));
    symmetrize(&(&u * diag * u.transpose()))
}

/// Generic time-varying system with `Q_t ⪰ 0` (rank deficient half of the time
/// is avoided; `Q_t` is pd) and `R_t ≻ 0`. Dynamics are scaled to spectral
/// norm around 1 so that costs stay moderate over short horizons.
pub fn random_system<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize, p: usize, horizon: usize) -> SystemInstance {
    let scale = |k: usize| 1.0 / (k as f64).sqrt();
    let a = (0..horizon).map(|_| gaussian_matrix(rng, n, n) * scale(n)).collect();
    let b = (0..horizon).map(|_| gaussian_matrix(rng, n, m) * scale(n)).collect();
    let c = (0..horizon).map(|_| gaussian_matrix(rng, p, n) * scale(n)).collect();
    let q = (0..=horizon).map(|_| random_spd(rng, n, 0.2, 2.0)).collect();
    let r = (0..horizon).map(|_| random_spd(rng, m, 0.2, 2.0)).collect();
    SystemInstance { a, b, c, q, r }
}

/// Covariance profile with every block's spectrum in `[lo, hi]`.
pub fn random_profile<R: Rng + ?Sized>(rng: &mut R, sys: &SystemInstance, lo: f64, hi: f64) -> CovarianceProfile {
    let (n, p, t) = (sys.n(), sys.p(), sys.horizon());
    CovarianceProfile {
        x0: random_spd(rng, n, lo, hi),
        w: (0..t).map(|_| random_spd(rng, n, lo, hi)).collect(),
        v: (0..t).map(|_| random_spd(rng, p, lo, hi)).collect(),
    }
}
