//! Classical finite-horizon LQG with known zero-mean Gaussian noise.
//!
//! The optimal policy is `u_t = K_t x̂_t`, where `K_t` comes from the backward
//! Riccati recursion and `x̂_t` from the Kalman filter. The optimal cost is
//! evaluated in closed form from the Riccati matrices and the filter
//! covariances.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matops::{ensure_square_finite, min_eigenvalue, spd_inverse_checked, sym_sqrt, symmetrize, Mat};

/// Pivot threshold below which a Cholesky factor is reported as singular.
pub const PIVOT_THRESHOLD: f64 = 1e-10;

/// Time-varying linear system with quadratic costs over horizon `T`.
///
/// `a`, `b`, `c`, `r` hold `T` matrices (`t = 0..T-1`), `q` holds `T + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemInstance {
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
    pub c: Vec<Mat>,
    pub q: Vec<Mat>,
    pub r: Vec<Mat>,
}

impl SystemInstance {
    pub fn new(a: Vec<Mat>, b: Vec<Mat>, c: Vec<Mat>, q: Vec<Mat>, r: Vec<Mat>) -> Result<Self> {
        let sys = SystemInstance { a, b, c, q, r };
        sys.validate()?;
        Ok(sys)
    }

    /// Same matrices at every stage.
    pub fn time_invariant(a: &Mat, b: &Mat, c: &Mat, q: &Mat, r: &Mat, horizon: usize) -> Result<Self> {
        Self::new(
            vec![a.clone(); horizon],
            vec![b.clone(); horizon],
            vec![c.clone(); horizon],
            vec![q.clone(); horizon + 1],
            vec![r.clone(); horizon],
        )
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn n(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn m(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn p(&self) -> usize {
        self.c[0].nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.a.len();
        if t == 0 {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        if self.b.len() != t || self.c.len() != t || self.r.len() != t || self.q.len() != t + 1 {
            return Err(Error::InvalidInput(format!(
                "stage counts inconsistent: A {}, B {}, C {}, Q {}, R {}",
                t,
                self.b.len(),
                self.c.len(),
                self.q.len(),
                self.r.len()
            )));
        }
        let (n, m, p) = (self.a[0].nrows(), self.b[0].ncols(), self.c[0].nrows());
        if n == 0 || m == 0 || p == 0 {
            return Err(Error::InvalidInput("dimensions must be positive".into()));
        }
        for s in 0..t {
            let shapes_ok = self.a[s].shape() == (n, n)
                && self.b[s].shape() == (n, m)
                && self.c[s].shape() == (p, n)
                && self.r[s].shape() == (m, m);
            if !shapes_ok {
                return Err(Error::InvalidInput(format!("inconsistent dimensions at t = {s}")));
            }
            if self.a[s].iter().chain(self.b[s].iter()).chain(self.c[s].iter()).any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite system matrix at t = {s}")));
            }
            ensure_square_finite(&self.r[s], "R_t")?;
            if min_eigenvalue(&self.r[s]) < 1e-10 {
                return Err(Error::InvalidInput(format!("R_{s} is not positive definite")));
            }
        }
        for (s, q) in self.q.iter().enumerate() {
            if q.shape() != (n, n) {
                return Err(Error::InvalidInput(format!("Q_{s} has wrong shape")));
            }
            ensure_square_finite(q, "Q_t")?;
            if min_eigenvalue(q) < -1e-10 {
                return Err(Error::InvalidInput(format!("Q_{s} is not positive semidefinite")));
            }
        }
        Ok(())
    }
}

/// One covariance matrix per noise term: `x0`, `w_0..w_{T-1}`, `v_0..v_{T-1}`.
///
/// Blocks are addressed by a flat index `z`: `0` is `x0`, `1..=T` are the
/// process noises and `T+1..=2T` the measurement noises.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceProfile {
    pub x0: Mat,
    pub w: Vec<Mat>,
    pub v: Vec<Mat>,
}

/// Which noise term a flat block index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseTerm {
    InitialState,
    Process(usize),
    Measurement(usize),
}

impl CovarianceProfile {
    pub fn horizon(&self) -> usize {
        self.w.len()
    }

    pub fn num_blocks(&self) -> usize {
        1 + self.w.len() + self.v.len()
    }

    pub fn term(&self, z: usize) -> NoiseTerm {
        let t = self.horizon();
        match z {
            0 => NoiseTerm::InitialState,
            z if z <= t => NoiseTerm::Process(z - 1),
            z => NoiseTerm::Measurement(z - t - 1),
        }
    }

    pub fn block(&self, z: usize) -> &Mat {
        match self.term(z) {
            NoiseTerm::InitialState => &self.x0,
            NoiseTerm::Process(t) => &self.w[t],
            NoiseTerm::Measurement(t) => &self.v[t],
        }
    }

    pub fn block_mut(&mut self, z: usize) -> &mut Mat {
        match self.term(z) {
            NoiseTerm::InitialState => &mut self.x0,
            NoiseTerm::Process(t) => &mut self.w[t],
            NoiseTerm::Measurement(t) => &mut self.v[t],
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Mat> {
        std::iter::once(&self.x0).chain(self.w.iter()).chain(self.v.iter())
    }

    /// Rebuild a profile from flat blocks in `z` order.
    pub fn from_blocks(blocks: Vec<Mat>) -> Result<Self> {
        if blocks.is_empty() || blocks.len() % 2 == 0 {
            return Err(Error::InvalidInput(format!("expected 2T+1 blocks, got {}", blocks.len())));
        }
        let t = (blocks.len() - 1) / 2;
        let mut it = blocks.into_iter();
        let x0 = it.next().unwrap();
        let w: Vec<Mat> = it.by_ref().take(t).collect();
        let v: Vec<Mat> = it.collect();
        Ok(CovarianceProfile { x0, w, v })
    }

    /// `(1 − α)·self + α·target`, blockwise.
    pub fn step_towards(&self, target: &CovarianceProfile, alpha: f64) -> CovarianceProfile {
        let mix = |a: &Mat, b: &Mat| symmetrize(&(a * (1.0 - alpha) + b * alpha));
        CovarianceProfile {
            x0: mix(&self.x0, &target.x0),
            w: self.w.iter().zip(&target.w).map(|(a, b)| mix(a, b)).collect(),
            v: self.v.iter().zip(&target.v).map(|(a, b)| mix(a, b)).collect(),
        }
    }

    /// Frobenius distance summed over blocks.
    pub fn distance(&self, other: &CovarianceProfile) -> f64 {
        self.blocks()
            .zip(other.blocks())
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn validate(&self, sys: &SystemInstance) -> Result<()> {
        let (n, p, t) = (sys.n(), sys.p(), sys.horizon());
        if self.w.len() != t || self.v.len() != t {
            return Err(Error::InvalidInput(format!(
                "covariance profile horizon {} / {} does not match system horizon {t}",
                self.w.len(),
                self.v.len()
            )));
        }
        for (z, blk) in self.blocks().enumerate() {
            let d = if z <= t { n } else { p };
            if blk.shape() != (d, d) {
                return Err(Error::InvalidInput(format!("covariance block {z} has wrong shape")));
            }
            ensure_square_finite(blk, "covariance block")?;
            // Near-singular V_t is reported by the filter with its time index.
            if min_eigenvalue(blk) < -1e-10 {
                return Err(Error::InvalidInput(format!("covariance block {z} is not positive semidefinite")));
            }
        }
        Ok(())
    }
}

/// Output of the Riccati and Kalman recursions plus the optimal cost.
#[derive(Debug, Clone, PartialEq)]
pub struct LqgSolution {
    /// Riccati matrices `P_0..P_T`.
    pub p: Vec<Mat>,
    /// Feedback gains `K_0..K_{T-1}`.
    pub k: Vec<Mat>,
    /// Filtered covariances `Σ_t = Cov(x_t | y_0..y_t)`, `t = 0..T-1`.
    pub sigma_filt: Vec<Mat>,
    /// Predicted covariances `Σ_{t|t-1}`, `t = 0..T` (`Σ_{0|-1} = X0`).
    pub sigma_pred: Vec<Mat>,
    /// Filter gains `L_t = Σ_t C_tᵀ V_t⁻¹`.
    pub l: Vec<Mat>,
    pub cost: f64,
}

/// Backward Riccati recursion; returns `(P_0..P_T, K_0..K_{T-1})`.
pub fn riccati_backward(sys: &SystemInstance) -> Result<(Vec<Mat>, Vec<Mat>)> {
    let t_len = sys.horizon();
    let mut p = vec![Mat::zeros(0, 0); t_len + 1];
    let mut k = vec![Mat::zeros(0, 0); t_len];
    p[t_len] = sys.q[t_len].clone();
    for t in (0..t_len).rev() {
        let (a, b) = (&sys.a[t], &sys.b[t]);
        let pb = &p[t + 1] * b;
        let gram = &sys.r[t] + b.transpose() * &pb;
        let chol = symmetrize(&gram)
            .cholesky()
            .ok_or_else(|| Error::Numeric(format!("R_t + BᵀPB singular at t = {t}")))?;
        let rhs = pb.transpose() * a;
        let gain = -chol.solve(&rhs);
        let pt = a.transpose() * &p[t + 1] * a + &sys.q[t] + rhs.transpose() * &gain;
        p[t] = symmetrize(&pt);
        k[t] = gain;
    }
    Ok((p, k))
}

/// Forward filter covariance pass.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanPass {
    pub sigma_filt: Vec<Mat>,
    pub sigma_pred: Vec<Mat>,
    pub l: Vec<Mat>,
}

/// Forward Kalman covariance recursion from `Σ_{0|-1} = X0`.
pub fn kalman_forward(sys: &SystemInstance, cov: &CovarianceProfile) -> Result<KalmanPass> {
    cov.validate(sys)?;
    let t_len = sys.horizon();
    let mut pred = Vec::with_capacity(t_len + 1);
    let mut filt = Vec::with_capacity(t_len);
    let mut gains = Vec::with_capacity(t_len);
    pred.push(symmetrize(&cov.x0));
    for t in 0..t_len {
        let c = &sys.c[t];
        let prior = &pred[t];
        let v_inv = spd_inverse_checked(&cov.v[t], PIVOT_THRESHOLD)
            .map_err(|pivot| Error::Conditioning { what: "measurement noise covariance V_t", t, pivot })?;
        let innovation = c * prior * c.transpose() + &cov.v[t];
        let s_inv = spd_inverse_checked(&innovation, PIVOT_THRESHOLD)
            .map_err(|pivot| Error::Conditioning { what: "innovation covariance", t, pivot })?;
        let pct = prior * c.transpose();
        let mut sigma = symmetrize(&(prior - &pct * &s_inv * pct.transpose()));
        if min_eigenvalue(&sigma) < -1e-10 * prior.norm().max(1.0) {
            // Joseph form only when the innovation form lost definiteness.
            let kc = &pct * &s_inv * c;
            let i_kc = Mat::identity(prior.nrows(), prior.nrows()) - kc;
            let kg = &pct * &s_inv;
            sigma = symmetrize(&(&i_kc * prior * i_kc.transpose() + &kg * &cov.v[t] * kg.transpose()));
        }
        gains.push(&sigma * c.transpose() * v_inv);
        let next = symmetrize(&(&sys.a[t] * &sigma * sys.a[t].transpose() + &cov.w[t]));
        filt.push(sigma);
        pred.push(next);
    }
    Ok(KalmanPass { sigma_filt: filt, sigma_pred: pred, l: gains })
}

/// `Σ_{t<T} Tr((Q_t − P_t)Σ_t) + Σ_{t≤T} Tr(P_t Σ_{t|t-1})`, which equals the
/// usual closed form since `Σ_{t|t-1} = A Σ_{t-1} Aᵀ + W_{t-1}` and `Σ_{0|-1} = X0`.
pub(crate) fn cost_from_recursions(sys: &SystemInstance, p: &[Mat], filt: &[Mat], pred: &[Mat]) -> f64 {
    let t_len = sys.horizon();
    let mut cost = 0.0;
    for t in 0..t_len {
        cost += crate::matops::inner(&(&sys.q[t] - &p[t]), &filt[t]);
    }
    for t in 0..=t_len {
        cost += crate::matops::inner(&p[t], &pred[t]);
    }
    cost
}

/// Optimal LQG cost together with all gains and covariances.
pub fn lqg_value(sys: &SystemInstance, cov: &CovarianceProfile) -> Result<LqgSolution> {
    let (p, k) = riccati_backward(sys)?;
    let pass = kalman_forward(sys, cov)?;
    let cost = cost_from_recursions(sys, &p, &pass.sigma_filt, &pass.sigma_pred);
    Ok(LqgSolution {
        p,
        k,
        sigma_filt: pass.sigma_filt,
        sigma_pred: pass.sigma_pred,
        l: pass.l,
        cost,
    })
}

fn sample_gaussian(factor: &Mat, rng: &mut ChaCha20Rng) -> DVector<f64> {
    let d = factor.nrows();
    let xi = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
    factor * xi
}

/// Monte-Carlo estimate of the closed-loop cost of `u_t = K_t x̂_t` with the
/// Kalman estimator. Returns `(mean_cost, standard_error)`.
pub fn simulate_closed_loop(
    sys: &SystemInstance,
    cov: &CovarianceProfile,
    gains: &LqgSolution,
    num_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    cov.validate(sys)?;
    let t_len = sys.horizon();
    if gains.k.len() != t_len || gains.l.len() != t_len {
        return Err(Error::InvalidInput("gains do not match the system horizon".into()));
    }
    if num_samples == 0 {
        return Err(Error::InvalidInput("num_samples must be positive".into()));
    }
    let x0_f = sym_sqrt(&cov.x0)?;
    let w_f: Vec<Mat> = cov.w.iter().map(sym_sqrt).collect::<Result<_>>()?;
    let v_f: Vec<Mat> = cov.v.iter().map(sym_sqrt).collect::<Result<_>>()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..num_samples {
        let mut x = sample_gaussian(&x0_f, &mut rng);
        let y0 = &sys.c[0] * &x + sample_gaussian(&v_f[0], &mut rng);
        let mut xhat = &gains.l[0] * y0;
        let mut cost = 0.0;
        for t in 0..t_len {
            let u = &gains.k[t] * &xhat;
            cost += x.dot(&(&sys.q[t] * &x)) + u.dot(&(&sys.r[t] * &u));
            let w = sample_gaussian(&w_f[t], &mut rng);
            x = &sys.a[t] * &x + &sys.b[t] * &u + w;
            if t + 1 < t_len {
                let y = &sys.c[t + 1] * &x + sample_gaussian(&v_f[t + 1], &mut rng);
                let predicted = &sys.a[t] * &xhat + &sys.b[t] * &u;
                xhat = &predicted + &gains.l[t + 1] * (y - &sys.c[t + 1] * &predicted);
            }
        }
        cost += x.dot(&(&sys.q[t_len] * &x));
        sum += cost;
        sum_sq += cost * cost;
    }
    let n = num_samples as f64;
    let mean = sum / n;
    let var = if num_samples > 1 { (sum_sq - n * mean * mean) / (n - 1.0) } else { 0.0 };
    Ok((mean, (var.max(0.0) / n).sqrt()))
}
