//! Gradient of the LQG value with respect to every noise covariance.
//!
//! The cost is `Σ_{t<T} Tr((Q_t − P_t)Σ_t) + Σ_{t≤T} Tr(P_t Π_t)` where
//! `Π_t = Σ_{t|t-1}`. Only the filter covariances depend on the noise, so the
//! reverse sweep runs through
//!
//! ```text
//! Σ_t     = Π_t − Π_t Cᵀ S⁻¹ C Π_t,   S = C Π_t Cᵀ + V_t
//! Π_{t+1} = A Σ_t Aᵀ + W_t
//! ```
//!
//! With `K = Π_t Cᵀ S⁻¹` and `M = I − K C` the update has differential
//! `dΣ_t = M dΠ_t Mᵀ + K dV_t Kᵀ`, which gives the adjoints
//!
//! ```text
//! Π̄_T = P_T
//! Σ̄_t = Q_t − P_t + Aᵀ Π̄_{t+1} A
//! W̄_t = Π̄_{t+1},   V̄_t = Kᵀ Σ̄_t K,   Π̄_t = P_t + Mᵀ Σ̄_t M
//! X̄_0 = Π̄_0
//! ```
//!
//! Gradients are the symmetric `G` with `df = Tr(G dΣ)` for symmetric `dΣ`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lqg::{cost_from_recursions, kalman_forward, riccati_backward, CovarianceProfile, SystemInstance};
use crate::matops::{min_eigenvalue, symmetrize, Mat};

/// One gradient block per covariance block, same layout as [`CovarianceProfile`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientProfile {
    pub dx0: Mat,
    pub dw: Vec<Mat>,
    pub dv: Vec<Mat>,
}

impl GradientProfile {
    pub fn num_blocks(&self) -> usize {
        1 + self.dw.len() + self.dv.len()
    }

    pub fn block(&self, z: usize) -> &Mat {
        let t = self.dw.len();
        match z {
            0 => &self.dx0,
            z if z <= t => &self.dw[z - 1],
            z => &self.dv[z - t - 1],
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Mat> {
        std::iter::once(&self.dx0).chain(self.dw.iter()).chain(self.dv.iter())
    }

    fn from_blocks(blocks: Vec<Mat>) -> Self {
        let t = (blocks.len() - 1) / 2;
        let mut it = blocks.into_iter();
        let dx0 = it.next().unwrap();
        let dw = it.by_ref().take(t).collect();
        let dv = it.collect();
        GradientProfile { dx0, dw, dv }
    }

    /// `Σ_z Tr(G_z Δ_z)`.
    pub fn pair(&self, direction: &CovarianceProfile) -> f64 {
        self.blocks().zip(direction.blocks()).map(|(g, d)| crate::matops::inner(g, d)).sum()
    }

    /// Smallest eigenvalue over all blocks.
    pub fn min_eigenvalue(&self) -> f64 {
        self.blocks().map(min_eigenvalue).fold(f64::INFINITY, f64::min)
    }

    /// Largest entrywise relative deviation of `self` from `reference`, per block,
    /// maximized over blocks.
    pub fn max_relative_error(&self, reference: &GradientProfile) -> f64 {
        self.blocks()
            .zip(reference.blocks())
            .map(|(a, b)| (a - b).amax() / b.amax().max(1e-12))
            .fold(0.0, f64::max)
    }
}

/// LQG value and its exact gradient.
pub fn lqg_gradient(sys: &SystemInstance, cov: &CovarianceProfile) -> Result<(f64, GradientProfile)> {
    let (p, _) = riccati_backward(sys)?;
    let pass = kalman_forward(sys, cov)?;
    let value = cost_from_recursions(sys, &p, &pass.sigma_filt, &pass.sigma_pred);

    let t_len = sys.horizon();
    let n = sys.n();
    let mut dw = vec![Mat::zeros(0, 0); t_len];
    let mut dv = vec![Mat::zeros(0, 0); t_len];
    let mut pi_bar = p[t_len].clone();
    for t in (0..t_len).rev() {
        let (a, c) = (&sys.a[t], &sys.c[t]);
        let prior = &pass.sigma_pred[t];
        let s = c * prior * c.transpose() + &cov.v[t];
        // S is pd here: the forward pass already certified it.
        let chol = symmetrize(&s).cholesky().ok_or(Error::Conditioning {
            what: "innovation covariance",
            t,
            pivot: 0.0,
        })?;
        let gain = chol.solve(&(c * prior)).transpose();
        let m = Mat::identity(n, n) - &gain * c;
        let sigma_bar = &sys.q[t] - &p[t] + a.transpose() * &pi_bar * a;
        dw[t] = pi_bar;
        dv[t] = symmetrize(&(gain.transpose() * &sigma_bar * &gain));
        pi_bar = symmetrize(&(&p[t] + m.transpose() * &sigma_bar * &m));
    }
    Ok((value, GradientProfile { dx0: pi_bar, dw, dv }))
}

/// Default step of [`fd_gradient`] before scaling by `1 + ‖Σ_z‖_F`.
pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of the LQG value along the symmetric basis
/// `(e_i e_jᵀ + e_j e_iᵀ) / (1 + [i = j])` of every block, with the step scaled
/// by `1 + ‖Σ_z‖_F`.
pub fn fd_gradient(sys: &SystemInstance, cov: &CovarianceProfile, step: f64) -> Result<GradientProfile> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {step}")));
    }
    cov.validate(sys)?;
    let t_len = sys.horizon();
    let mut directions = Vec::new();
    for (z, blk) in cov.blocks().enumerate() {
        for i in 0..blk.nrows() {
            for j in i..blk.nrows() {
                directions.push((z, i, j));
            }
        }
    }
    let eval = |z: usize, i: usize, j: usize, h: f64| -> Result<f64> {
        let mut perturbed = cov.clone();
        let blk = perturbed.block_mut(z);
        blk[(i, j)] += h;
        if i != j {
            blk[(j, i)] += h;
        }
        let measurement = z > t_len;
        let lam = min_eigenvalue(blk);
        if (measurement && lam < crate::lqg::PIVOT_THRESHOLD) || lam < -1e-10 {
            return Err(Error::StepTooLarge { block: block_name(z, t_len) });
        }
        Ok(crate::lqg::lqg_value(sys, &perturbed)?.cost)
    };
    let entries: Vec<(usize, usize, usize, f64)> = directions
        .par_iter()
        .map(|&(z, i, j)| {
            let h = step * (1.0 + cov.block(z).norm());
            let slope = (eval(z, i, j, h)? - eval(z, i, j, -h)?) / (2.0 * h);
            let g = if i == j { slope } else { slope / 2.0 };
            Ok((z, i, j, g))
        })
        .collect::<Result<_>>()?;
    let mut blocks: Vec<Mat> = cov.blocks().map(|b| Mat::zeros(b.nrows(), b.ncols())).collect();
    for (z, i, j, g) in entries {
        blocks[z][(i, j)] = g;
        blocks[z][(j, i)] = g;
    }
    Ok(GradientProfile::from_blocks(blocks))
}

fn block_name(z: usize, horizon: usize) -> String {
    match z {
        0 => "X0".to_string(),
        z if z <= horizon => format!("W_{}", z - 1),
        z => format!("V_{}", z - horizon - 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqg::lqg_value;
    use crate::random::{random_profile, random_system, InstanceRng};
    use rand::SeedableRng;

    fn scalar(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    #[test]
    fn scalar_one_step_matches_fd() {
        let sys = SystemInstance::time_invariant(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0), 1)
            .unwrap();
        let cov = CovarianceProfile { x0: scalar(1.0), w: vec![scalar(1.0)], v: vec![scalar(1.0)] };
        let (value, g) = lqg_gradient(&sys, &cov).unwrap();
        assert!((value - 2.75).abs() < 1e-14);
        // f = Σ_0/2 + W + 3X0/2 with Σ_0 = X0·V/(X0 + V).
        assert!((g.dw[0][(0, 0)] - 1.0).abs() < 1e-14);
        assert!((g.dx0[(0, 0)] - 1.625).abs() < 1e-14);
        assert!((g.dv[0][(0, 0)] - 0.125).abs() < 1e-14);
        let fd = fd_gradient(&sys, &cov, FD_STEP).unwrap();
        assert!(fd.max_relative_error(&g) < 1e-6);
    }

    #[test]
    fn random_instance_matches_fd() {
        let mut rng = InstanceRng::seed_from_u64(17);
        let sys = random_system(&mut rng, 4, 2, 3, 6);
        let cov = random_profile(&mut rng, &sys, 0.5, 2.0);
        let (value, g) = lqg_gradient(&sys, &cov).unwrap();
        assert!((value - lqg_value(&sys, &cov).unwrap().cost).abs() <= 1e-12 * value.abs());
        let fd = fd_gradient(&sys, &cov, FD_STEP).unwrap();
        let err = fd.max_relative_error(&g);
        assert!(err < 1e-5, "relative error {err}");
        assert!(g.min_eigenvalue() > -1e-8);
    }

    #[test]
    fn blind_uncontrolled_system_gives_riccati_gradient() {
        let a = Mat::from_row_slice(2, 2, &[0.8, 0.3, -0.2, 0.5]);
        let sys = SystemInstance::time_invariant(
            &a,
            &Mat::zeros(2, 1),
            &Mat::zeros(1, 2),
            &Mat::identity(2, 2),
            &Mat::identity(1, 1),
            4,
        )
        .unwrap();
        let mut rng = InstanceRng::seed_from_u64(2);
        let cov = random_profile(&mut rng, &sys, 0.5, 1.5);
        let (_, g) = lqg_gradient(&sys, &cov).unwrap();
        let (p, _) = riccati_backward(&sys).unwrap();
        for t in 1..=4 {
            assert!((&g.dw[t - 1] - &p[t]).norm() < 1e-12);
        }
        assert!((&g.dx0 - &p[0]).norm() < 1e-12);
        assert!(g.dv.iter().all(|d| d.norm() == 0.0));
    }

    #[test]
    fn blind_controlled_system_has_open_loop_gradient() {
        // Without observations the filter ignores y, so W_{t-1} enters through the
        // open-loop propagation of the state cost.
        let a = Mat::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.7]);
        let sys = SystemInstance::time_invariant(
            &a,
            &Mat::identity(2, 2),
            &Mat::zeros(1, 2),
            &Mat::identity(2, 2),
            &Mat::identity(2, 2),
            3,
        )
        .unwrap();
        let mut rng = InstanceRng::seed_from_u64(5);
        let cov = random_profile(&mut rng, &sys, 0.5, 1.5);
        let (_, g) = lqg_gradient(&sys, &cov).unwrap();
        let mut expected = sys.q[3].clone();
        for t in (1..=3).rev() {
            assert!((&g.dw[t - 1] - &expected).norm() < 1e-12);
            expected = &sys.q[t - 1] + a.transpose() * &expected * &a;
        }
        assert!(g.dv.iter().all(|d| d.norm() == 0.0));
    }

    #[test]
    fn fd_error_shrinks_quadratically() {
        let mut rng = InstanceRng::seed_from_u64(23);
        let sys = random_system(&mut rng, 2, 1, 1, 3);
        let cov = random_profile(&mut rng, &sys, 0.5, 1.5);
        let (_, g) = lqg_gradient(&sys, &cov).unwrap();
        let e1 = (&fd_gradient(&sys, &cov, 1e-2).unwrap().dx0 - &g.dx0).amax();
        let e2 = (&fd_gradient(&sys, &cov, 5e-3).unwrap().dx0 - &g.dx0).amax();
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn first_order_expansion_is_second_order_accurate() {
        let mut rng = InstanceRng::seed_from_u64(31);
        let sys = random_system(&mut rng, 3, 2, 2, 4);
        let cov = random_profile(&mut rng, &sys, 1.0, 2.0);
        let dir = random_profile(&mut rng, &sys, -0.5, 0.5);
        let (f0, g) = lqg_gradient(&sys, &cov).unwrap();
        let slope = g.pair(&dir);
        let remainder = |eps: f64| {
            let moved = cov.step_towards(&add(&cov, &dir), eps);
            lqg_value(&sys, &moved).unwrap().cost - f0 - eps * slope
        };
        let ratio = remainder(1e-3) / remainder(5e-4);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    fn add(a: &CovarianceProfile, b: &CovarianceProfile) -> CovarianceProfile {
        CovarianceProfile {
            x0: &a.x0 + &b.x0,
            w: a.w.iter().zip(&b.w).map(|(x, y)| x + y).collect(),
            v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
        }
    }

    #[test]
    fn step_too_large_is_reported() {
        let sys = SystemInstance::time_invariant(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0), 1)
            .unwrap();
        let cov = CovarianceProfile { x0: scalar(1.0), w: vec![scalar(1.0)], v: vec![scalar(0.01)] };
        let err = fd_gradient(&sys, &cov, 0.1).unwrap_err();
        assert!(matches!(err, Error::StepTooLarge { ref block } if block == "V_0"), "{err:?}");
    }
}
