//! Whole-trajectory (stacked) form of the system and purified-output policies.
//!
//! With `w = (x0, w_0, …, w_{T-1})` and `v = (v_0, …, v_{T-1})` the trajectory
//! obeys `x = Hu + Gw` and `y = Cx + v`. The purified observations
//! `η = y − y'`, where `y'` is the output of a noise-free copy driven by the
//! same inputs, satisfy `η = Dw + v` with `D = CG`, independently of `u`.
//!
//! All matrices are dense; this module is for cross-checking at small sizes.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::divergence::MomentPair;
use crate::error::{Error, Result};
use crate::frank_wolfe::NominalModel;
use crate::lqg::{lqg_value, CovarianceProfile, SystemInstance};
use crate::matops::{inner, sym_sqrt, symmetrize, Mat};
use crate::oracle::linear_oracle;

/// Largest stacked state dimension `n(T+1)` accepted by [`build_stacked`].
pub const MAX_STACKED_STATE: usize = 200;

/// Largest number of free causal entries in [`inner_minimum`].
pub const MAX_CAUSAL_ENTRIES: usize = 4000;

#[derive(Debug, Clone, PartialEq)]
pub struct StackedSystem {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub horizon: usize,
    /// `n(T+1) × mT`, strictly block lower triangular.
    pub h: Mat,
    /// `n(T+1) × n(T+1)`, block `(t, s)` is `A_{t-1}⋯A_s`.
    pub g: Mat,
    /// `pT × n(T+1)`; the last block column is zero.
    pub c: Mat,
    pub d: Mat,
    pub q: Mat,
    pub r: Mat,
    /// `R + HᵀQH`.
    pub r_bar: Mat,
}

fn block_diag(blocks: &[Mat]) -> Mat {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// `A_{t-1} A_{t-2} ⋯ A_s`, the identity when `s = t`.
fn transition(sys: &SystemInstance, t: usize, s: usize) -> Mat {
    let n = sys.n();
    (s..t).fold(Mat::identity(n, n), |acc, k| &sys.a[k] * acc)
}

pub fn build_stacked(sys: &SystemInstance) -> Result<StackedSystem> {
    sys.validate()?;
    let (n, m, p, t_len) = (sys.n(), sys.m(), sys.p(), sys.horizon());
    let nx = n * (t_len + 1);
    if nx > MAX_STACKED_STATE {
        return Err(Error::Unsupported(format!(
            "stacked state dimension {nx} exceeds the limit of {MAX_STACKED_STATE}"
        )));
    }
    let mut g = Mat::zeros(nx, nx);
    let mut h = Mat::zeros(nx, m * t_len);
    for t in 0..=t_len {
        for s in 0..=t {
            // Column block `s` of G carries x0 for s = 0 and w_{s-1} otherwise.
            g.view_mut((t * n, s * n), (n, n)).copy_from(&transition(sys, t, s));
        }
        for s in 0..t {
            h.view_mut((t * n, s * m), (n, m)).copy_from(&(transition(sys, t, s + 1) * &sys.b[s]));
        }
    }
    let mut c = Mat::zeros(p * t_len, nx);
    for t in 0..t_len {
        c.view_mut((t * p, t * n), (p, n)).copy_from(&sys.c[t]);
    }
    let d = &c * &g;
    let q = block_diag(&sys.q);
    let r = block_diag(&sys.r);
    let r_bar = symmetrize(&(&r + h.transpose() * &q * &h));
    Ok(StackedSystem { n, m, p, horizon: t_len, h, g, c, d, q, r, r_bar })
}

/// True when every block strictly above the block diagonal is exactly zero.
pub fn is_block_lower_triangular(u: &Mat, row_block: usize, col_block: usize) -> bool {
    let blocks = u.nrows() / row_block.max(1);
    (0..blocks).all(|i| {
        (i + 1..u.ncols() / col_block.max(1))
            .all(|j| u.view((i * row_block, j * col_block), (row_block, col_block)).iter().all(|&x| x == 0.0))
    })
}

/// `u = q + Uη` with `U` causal (block lower triangular).
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    pub u: Mat,
    pub q: DVector<f64>,
}

impl AffinePolicy {
    pub fn new(ss: &StackedSystem, u: Mat, q: DVector<f64>) -> Result<Self> {
        let (rows, cols) = (ss.m * ss.horizon, ss.p * ss.horizon);
        if u.shape() != (rows, cols) || q.len() != rows {
            return Err(Error::InvalidInput(format!("policy must be {rows}×{cols} with a length-{rows} intercept")));
        }
        if !is_block_lower_triangular(&u, ss.m, ss.p) {
            return Err(Error::InvalidInput("policy is not causal".into()));
        }
        Ok(AffinePolicy { u, q })
    }

    pub fn zero(ss: &StackedSystem) -> Self {
        AffinePolicy { u: Mat::zeros(ss.m * ss.horizon, ss.p * ss.horizon), q: DVector::zeros(ss.m * ss.horizon) }
    }
}

/// Stacked first and second moments of `w` and `v`. Second moments are
/// block diagonal: distinct noise terms are uncorrelated.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedMoments {
    pub mu_w: DVector<f64>,
    pub m_w: Mat,
    pub mu_v: DVector<f64>,
    pub m_v: Mat,
}

impl StackedMoments {
    pub fn from_pairs(x0: &MomentPair, w: &[MomentPair], v: &[MomentPair]) -> Self {
        let w_all: Vec<&MomentPair> = std::iter::once(x0).chain(w).collect();
        let stack_mean = |ps: &[&MomentPair]| {
            DVector::from_iterator(ps.iter().map(|p| p.dim()).sum(), ps.iter().flat_map(|p| p.mean.iter().copied()))
        };
        let v_all: Vec<&MomentPair> = v.iter().collect();
        StackedMoments {
            mu_w: stack_mean(&w_all),
            m_w: block_diag(&w_all.iter().map(|p| p.second_moment.clone()).collect::<Vec<_>>()),
            mu_v: stack_mean(&v_all),
            m_v: block_diag(&v_all.iter().map(|p| p.second_moment.clone()).collect::<Vec<_>>()),
        }
    }

    /// Zero-mean moments with the given covariances.
    pub fn from_profile(cov: &CovarianceProfile) -> Self {
        let w_blocks: Vec<Mat> = std::iter::once(cov.x0.clone()).chain(cov.w.iter().cloned()).collect();
        let m_w = block_diag(&w_blocks);
        let m_v = block_diag(&cov.v);
        StackedMoments { mu_w: DVector::zeros(m_w.nrows()), m_w, mu_v: DVector::zeros(m_v.nrows()), m_v }
    }

    pub fn is_zero_mean(&self) -> bool {
        self.mu_w.iter().chain(self.mu_v.iter()).all(|&x| x == 0.0)
    }

    pub fn validate(&self, ss: &StackedSystem) -> Result<()> {
        let (nw, nv) = (ss.n * (ss.horizon + 1), ss.p * ss.horizon);
        if self.mu_w.len() != nw || self.m_w.shape() != (nw, nw) || self.mu_v.len() != nv || self.m_v.shape() != (nv, nv)
        {
            return Err(Error::InvalidInput("moment stacks do not match the stacked system".into()));
        }
        let off_block_zero = |m: &Mat, b: usize| {
            (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i / b == j / b || m[(i, j)] == 0.0))
        };
        if !off_block_zero(&self.m_w, ss.n) || !off_block_zero(&self.m_v, ss.p) {
            return Err(Error::InvalidInput("correlated noise terms are not supported".into()));
        }
        Ok(())
    }
}

/// Expected cost `E[uᵀRu + xᵀQx]` of an affine purified-output policy,
/// which depends on the noise only through its first two moments.
pub fn affine_objective(ss: &StackedSystem, pol: &AffinePolicy, mom: &StackedMoments) -> Result<f64> {
    mom.validate(ss)?;
    let ud = &pol.u * &ss.d;
    let closed = &ss.g + &ss.h * &ud;
    let quad_w = ud.transpose() * &ss.r * &ud + closed.transpose() * &ss.q * &closed;
    let quad_v = pol.u.transpose() * &ss.r_bar * &pol.u;
    let cross = &ss.h.transpose() * &ss.q * &ss.g;
    let lin_w = (&ss.r_bar * &ud + cross) * &mom.mu_w;
    let lin_v = &ss.r_bar * &pol.u * &mom.mu_v;
    Ok(inner(&quad_w, &mom.m_w) + inner(&quad_v, &mom.m_v)
        + 2.0 * pol.q.dot(&(lin_w + lin_v))
        + pol.q.dot(&(&ss.r_bar * &pol.q)))
}

/// Minimizer over the intercept for fixed `U`:
/// `q⋆ = −R̄⁻¹((R̄UD + HᵀQG)μ_w + R̄Uμ_v)`.
pub fn optimal_intercept(ss: &StackedSystem, u: &Mat, mom: &StackedMoments) -> Result<DVector<f64>> {
    mom.validate(ss)?;
    let k_bar = (&ss.r_bar * u * &ss.d + ss.h.transpose() * &ss.q * &ss.g) * &mom.mu_w + &ss.r_bar * u * &mom.mu_v;
    let chol = ss.r_bar.clone().cholesky().ok_or_else(|| Error::Numeric("R̄ is not positive definite".into()))?;
    Ok(-chol.solve(&k_bar))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conversion {
    /// `(U, q)` acting on `η` to `(U', q')` acting on `y`: multiply by `(I + UCH)⁻¹`.
    PurifiedToOutput,
    /// `(U', q')` acting on `y` to `(U, q)` acting on `η`: multiply by `(I − U'CH)⁻¹`.
    OutputToPurified,
}

pub fn policy_convert(ss: &StackedSystem, dir: Conversion, pol: &AffinePolicy) -> Result<AffinePolicy> {
    let k = ss.m * ss.horizon;
    let uch = &pol.u * &ss.c * &ss.h;
    let lhs = match dir {
        Conversion::PurifiedToOutput => Mat::identity(k, k) + uch,
        Conversion::OutputToPurified => Mat::identity(k, k) - uch,
    };
    // Unit lower triangular, so forward substitution never divides by zero
    // and keeps zero blocks above the diagonal exactly zero.
    let u = lhs
        .solve_lower_triangular(&pol.u)
        .ok_or_else(|| Error::Numeric("policy conversion matrix is singular".into()))?;
    let q = lhs
        .solve_lower_triangular(&pol.q)
        .ok_or_else(|| Error::Numeric("policy conversion matrix is singular".into()))?;
    AffinePolicy::new(ss, u, q)
}

/// The LQG policy `u_t = K_t x̂_t` at `cov`, written as a causal linear map of
/// the purified observations.
pub fn kalman_policy_to_purified(sys: &SystemInstance, cov: &CovarianceProfile) -> Result<AffinePolicy> {
    let ss = build_stacked(sys)?;
    let output = kalman_output_policy(sys, &ss, cov)?;
    policy_convert(&ss, Conversion::OutputToPurified, &output)
}

/// The same policy as a causal linear map of the raw outputs `y`.
///
/// `x̂_t = Φ_t (y_0, …, y_t)` with `Φ_0 = L_0` and
/// `Φ_{t+1} = [(I − L_{t+1}C_{t+1})(A_t + B_t K_t) Φ_t, L_{t+1}]`.
pub fn kalman_output_policy(sys: &SystemInstance, ss: &StackedSystem, cov: &CovarianceProfile) -> Result<AffinePolicy> {
    let sol = lqg_value(sys, cov)?;
    let (n, m, p, t_len) = (ss.n, ss.m, ss.p, ss.horizon);
    let mut u = Mat::zeros(m * t_len, p * t_len);
    let mut phi = sol.l[0].clone();
    for t in 0..t_len {
        u.view_mut((t * m, 0), (m, p * (t + 1))).copy_from(&(&sol.k[t] * &phi));
        if t + 1 < t_len {
            let correct = Mat::identity(n, n) - &sol.l[t + 1] * &sys.c[t + 1];
            let mut next = Mat::zeros(n, p * (t + 2));
            next.view_mut((0, 0), (n, p * (t + 1)))
                .copy_from(&(correct * (&sys.a[t] + &sys.b[t] * &sol.k[t]) * &phi));
            next.view_mut((0, p * (t + 1)), (n, p)).copy_from(&sol.l[t + 1]);
            phi = next;
        }
    }
    AffinePolicy::new(ss, u, DVector::zeros(m * t_len))
}

/// Minimum of [`affine_objective`] over causal linear policies at zero-mean
/// moments (the optimal intercept is then zero).
///
/// The objective is `Tr(R̄ U N Uᵀ) + 2⟨E, U⟩ + Tr(GᵀQG M_w)` with
/// `N = D M_w Dᵀ + M_v` and `E = HᵀQG M_w Dᵀ`; setting its gradient to zero on
/// the causal entries gives `Σ_{(k,l)} R̄_{ik} N_{lj} U_{kl} = −E_{ij}`.
pub fn inner_minimum(ss: &StackedSystem, mom: &StackedMoments) -> Result<(AffinePolicy, f64)> {
    mom.validate(ss)?;
    if !mom.is_zero_mean() {
        return Err(Error::Unsupported("the joint minimization is implemented for zero-mean moments".into()));
    }
    let (m, p, t_len) = (ss.m, ss.p, ss.horizon);
    let free: Vec<(usize, usize)> = (0..m * t_len)
        .flat_map(|i| (0..p * (i / m + 1)).map(move |j| (i, j)))
        .collect();
    if free.len() > MAX_CAUSAL_ENTRIES {
        return Err(Error::Unsupported(format!("{} causal entries exceed the limit of {MAX_CAUSAL_ENTRIES}", free.len())));
    }
    let n_mat = symmetrize(&(&ss.d * &mom.m_w * ss.d.transpose() + &mom.m_v));
    let e = ss.h.transpose() * &ss.q * &ss.g * &mom.m_w * ss.d.transpose();
    let k = free.len();
    let mut lhs = Mat::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (a, &(i, j)) in free.iter().enumerate() {
        rhs[a] = -e[(i, j)];
        for (b, &(kk, l)) in free.iter().enumerate() {
            lhs[(a, b)] = ss.r_bar[(i, kk)] * n_mat[(l, j)];
        }
    }
    let chol = lhs
        .cholesky()
        .ok_or_else(|| Error::Numeric("normal equations of the inner minimization are singular".into()))?;
    let sol = chol.solve(&rhs);
    let mut u = Mat::zeros(m * t_len, p * t_len);
    for (a, &(i, j)) in free.iter().enumerate() {
        u[(i, j)] = sol[a];
    }
    let pol = AffinePolicy::new(ss, u, DVector::zeros(m * t_len))?;
    let value = affine_objective(ss, &pol, mom)?;
    Ok((pol, value))
}

/// Per-noise-term weights `Γ_z` of a fixed linear policy's cost, which is
/// `Σ_z ⟨Γ_z, M_z⟩` for uncorrelated zero-mean noise. The weights are the
/// diagonal blocks of `(UD)ᵀRUD + (G + HUD)ᵀQ(G + HUD)` and `UᵀR̄U`, in
/// profile order.
pub fn policy_weights(ss: &StackedSystem, pol: &AffinePolicy) -> Vec<Mat> {
    let ud = &pol.u * &ss.d;
    let closed = &ss.g + &ss.h * &ud;
    let psi_w = symmetrize(&(ud.transpose() * &ss.r * &ud + closed.transpose() * &ss.q * &closed));
    let psi_v = symmetrize(&(pol.u.transpose() * &ss.r_bar * &pol.u));
    let (n, p) = (ss.n, ss.p);
    let w_blocks = (0..=ss.horizon).map(|t| psi_w.view((t * n, t * n), (n, n)).clone_owned());
    let v_blocks = (0..ss.horizon).map(|t| psi_v.view((t * p, t * p), (p, p)).clone_owned());
    w_blocks.chain(v_blocks).collect()
}

/// Worst-case expected cost of a fixed linear policy over the product of
/// balls, with the maximizing profile. The cost is linear in the noise
/// covariances, so a single oracle call per noise term is exact.
pub fn fixed_policy_worst_case(
    ss: &StackedSystem,
    pol: &AffinePolicy,
    model: &NominalModel,
    delta: f64,
) -> Result<(f64, CovarianceProfile)> {
    if model.balls.len() != 2 * ss.horizon + 1 {
        return Err(Error::InvalidInput("model does not match the stacked horizon".into()));
    }
    if pol.q.iter().any(|&x| x != 0.0) {
        return Err(Error::Unsupported("fixed-policy worst case is implemented for linear policies".into()));
    }
    let nominal = model.nominal_profile();
    let base = affine_objective(ss, pol, &StackedMoments::from_profile(&nominal))?;
    let weights = policy_weights(ss, pol);
    let floors = model.floors();
    let mut value = base;
    let mut blocks = Vec::with_capacity(weights.len());
    for (z, (gamma, ball)) in weights.iter().zip(&model.balls).enumerate() {
        let res = linear_oracle(ball, gamma, nominal.block(z), floors[z], delta)
            .map_err(|e| Error::OracleAt { z, source: Box::new(e) })?;
        value += res.objective;
        blocks.push(res.sigma_star);
    }
    Ok((value, CovarianceProfile::from_blocks(blocks)?))
}

/// Which signal an [`AffinePolicy`] is applied to in [`simulate_policy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    Purified,
    Output,
}

fn gaussian(factor: &Mat, rng: &mut ChaCha20Rng) -> DVector<f64> {
    let d = factor.nrows();
    factor * DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)))
}

/// Monte-Carlo cost of an affine policy under zero-mean Gaussian noise,
/// simulated step by step with the noise-free copy of the system running
/// alongside. Returns `(mean, standard_error)`.
pub fn simulate_policy(
    sys: &SystemInstance,
    cov: &CovarianceProfile,
    pol: &AffinePolicy,
    feedback: Feedback,
    num_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    cov.validate(sys)?;
    if num_samples < 2 {
        return Err(Error::InvalidInput("need at least two samples".into()));
    }
    let (m, p, t_len) = (sys.m(), sys.p(), sys.horizon());
    let x0_f = sym_sqrt(&cov.x0)?;
    let w_f: Vec<Mat> = cov.w.iter().map(sym_sqrt).collect::<Result<_>>()?;
    let v_f: Vec<Mat> = cov.v.iter().map(sym_sqrt).collect::<Result<_>>()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut signal = DVector::zeros(p * t_len);
    for _ in 0..num_samples {
        let mut x = gaussian(&x0_f, &mut rng);
        let mut x_free = DVector::zeros(x.len());
        let mut cost = 0.0;
        for t in 0..t_len {
            let y = &sys.c[t] * &x + gaussian(&v_f[t], &mut rng);
            let obs = match feedback {
                Feedback::Purified => &y - &sys.c[t] * &x_free,
                Feedback::Output => y,
            };
            signal.rows_mut(t * p, p).copy_from(&obs);
            let u = pol.q.rows(t * m, m) + pol.u.view((t * m, 0), (m, p * (t + 1))) * signal.rows(0, p * (t + 1));
            cost += x.dot(&(&sys.q[t] * &x)) + u.dot(&(&sys.r[t] * &u));
            let w = gaussian(&w_f[t], &mut rng);
            x = &sys.a[t] * &x + &sys.b[t] * &u + w;
            x_free = &sys.a[t] * &x_free + &sys.b[t] * &u;
        }
        cost += x.dot(&(&sys.q[t_len] * &x));
        sum += cost;
        sum_sq += cost * cost;
    }
    let n = num_samples as f64;
    let mean = sum / n;
    let var = (sum_sq - n * mean * mean) / (n - 1.0);
    Ok((mean, (var.max(0.0) / n).sqrt()))
}
