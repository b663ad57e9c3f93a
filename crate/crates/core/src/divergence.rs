//! Divergences between Gaussian moment pairs and ambiguity-ball membership.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::matops::{ensure_same_dim, ensure_square_finite, logdet_spd, min_eigenvalue, sym_eigen, sym_inv, sym_sqrt, symmetrize, Mat};
use crate::oracle::OracleResult;
use crate::random::{random_spd, InstanceRng};

/// First and second moments `(μ, M)` of a distribution; the covariance is `M − μμᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub mean: DVector<f64>,
    pub second_moment: Mat,
}

impl MomentPair {
    pub fn new(mean: DVector<f64>, second_moment: Mat) -> Result<Self> {
        ensure_square_finite(&second_moment, "second moment")?;
        if mean.len() != second_moment.nrows() || mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("mean does not match second moment".into()));
        }
        let pair = MomentPair { second_moment: symmetrize(&second_moment), mean };
        if min_eigenvalue(&pair.covariance()) < -1e-10 * (1.0 + pair.second_moment.norm()) {
            return Err(Error::InvalidInput("second moment is not above mean·meanᵀ".into()));
        }
        Ok(pair)
    }

    pub fn from_mean_cov(mean: DVector<f64>, cov: &Mat) -> Result<Self> {
        let m = cov + &mean * mean.transpose();
        Self::new(mean, m)
    }

    pub fn zero_mean(cov: &Mat) -> Result<Self> {
        Self::new(DVector::zeros(cov.nrows()), cov.clone())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> Mat {
        symmetrize(&(&self.second_moment - &self.mean * self.mean.transpose()))
    }
}

/// A divergence value, or the `+∞` flag for candidates outside the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DivValue {
    Finite(f64),
    Infinite,
}

impl DivValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            DivValue::Finite(x) => Some(x),
            DivValue::Infinite => None,
        }
    }

    pub fn within(self, bound: f64) -> bool {
        matches!(self, DivValue::Finite(x) if x <= bound)
    }
}

fn check_pairs(a: &MomentPair, b: &MomentPair) -> Result<()> {
    ensure_same_dim(&a.second_moment, &b.second_moment, "moment pairs")
}

fn pd_or_nominal_error(cov: &Mat) -> Result<()> {
    if min_eigenvalue(cov) < 1e-12 {
        return Err(Error::InvalidNominal("nominal covariance must be positive definite".into()));
    }
    Ok(())
}

/// Gelbrich distance; equals the 2-Wasserstein distance between the Gaussians.
pub fn gelbrich(a: &MomentPair, b: &MomentPair) -> Result<f64> {
    check_pairs(a, b)?;
    let (sa, sb) = (a.covariance(), b.covariance());
    let root_b = sym_sqrt(&sb)?;
    let cross = sym_sqrt(&symmetrize(&(&root_b * &sa * &root_b)))?;
    let shift = (&a.mean - &b.mean).norm_squared();
    let bures = (sa.trace() + sb.trace() - 2.0 * cross.trace()).max(0.0);
    Ok((shift + bures).sqrt())
}

/// KL-type divergence of `a` from `b`.
pub fn kl_t_divergence(a: &MomentPair, b: &MomentPair) -> Result<DivValue> {
    check_pairs(a, b)?;
    let (sa, sb) = (a.covariance(), b.covariance());
    pd_or_nominal_error(&sb)?;
    let sb_inv = sym_inv(&sb)?;
    let Some(logdet_a) = logdet_spd(&sa) else {
        return Ok(DivValue::Infinite);
    };
    let logdet_b = logdet_spd(&sb).ok_or_else(|| Error::InvalidNominal("nominal covariance singular".into()))?;
    let dmu = &a.mean - &b.mean;
    let quad = dmu.dot(&(&sb_inv * &dmu));
    let d = a.dim() as f64;
    Ok(DivValue::Finite(0.5 * (quad + (&sa * &sb_inv).trace() - logdet_a + logdet_b - d)))
}

/// `X_ε(Σ_a) = (Σ_b^{1/2} Σ_a Σ_b^{1/2} + (ε/4)² I)^{1/2} − (ε/4) I`.
pub fn entropic_x(sa: &Mat, sb: &Mat, eps: f64) -> Result<Mat> {
    let root_b = sym_sqrt(sb)?;
    let d = sa.nrows();
    let inner = symmetrize(&(&root_b * sa * &root_b)) + Mat::identity(d, d) * (eps / 4.0).powi(2);
    Ok(sym_sqrt(&inner)? - Mat::identity(d, d) * (eps / 4.0))
}

/// The expression under the square root of the entropy-regularized
/// Bures-Wasserstein distance. It can be negative: for `Σ_a = Σ_b = 1`, `ε = 1`
/// it is about `−1.93`.
pub fn entropic_ot_squared(a: &MomentPair, b: &MomentPair, eps: f64) -> Result<f64> {
    check_pairs(a, b)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!("entropic regularization must be positive, got {eps}")));
    }
    let (sa, sb) = (a.covariance(), b.covariance());
    if min_eigenvalue(&sa) <= 0.0 || min_eigenvalue(&sb) <= 0.0 {
        return Err(Error::InvalidInput("entropic OT needs positive definite covariances".into()));
    }
    let x = entropic_x(&sa, &sb, eps)?;
    let logdet_x = logdet_spd(&x).ok_or_else(|| Error::Numeric("X_ε is not positive definite".into()))?;
    let d = a.dim() as f64;
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    let log_term = 2.0 * d * two_pi_e.ln() + d * (eps / 2.0).ln() + logdet_x;
    let shift = (&a.mean - &b.mean).norm_squared();
    Ok(shift + sa.trace() + sb.trace() - 2.0 * x.trace() - eps / 2.0 * log_term)
}

/// Entropy-regularized Bures-Wasserstein distance; errors when the radicand
/// is negative.
pub fn entropic_ot(a: &MomentPair, b: &MomentPair, eps: f64) -> Result<f64> {
    let sq = entropic_ot_squared(a, b, eps)?;
    if sq < 0.0 {
        return Err(Error::Numeric(format!("entropic OT radicand is negative ({sq:e})")));
    }
    Ok(sq.sqrt())
}

/// Smallest value of the squared entropic distance to `nominal`, attained at
/// `Σ̂ + (ε/2) I` with the nominal mean.
pub fn entropic_min_squared(nominal: &MomentPair, eps: f64) -> Result<f64> {
    let d = nominal.dim();
    let cov = nominal.covariance() + Mat::identity(d, d) * (eps / 2.0);
    let best = MomentPair::from_mean_cov(nominal.mean.clone(), &cov)?;
    entropic_ot_squared(&best, nominal, eps)
}

/// Score-matching (Fisher) divergence between Gaussians.
pub fn fisher_gaussian(a: &MomentPair, b: &MomentPair) -> Result<f64> {
    check_pairs(a, b)?;
    let (sa, sb) = (a.covariance(), b.covariance());
    if min_eigenvalue(&sa) <= 0.0 || min_eigenvalue(&sb) <= 0.0 {
        return Err(Error::InvalidInput("Fisher divergence needs positive definite covariances".into()));
    }
    let sb_inv = sym_inv(&sb)?;
    let sa_inv = sym_inv(&sa)?;
    let scaled = &sb_inv * (&a.mean - &b.mean);
    Ok(scaled.norm_squared() + (&sb_inv * &sb_inv * &sa - &sb_inv * 2.0 + sa_inv).trace())
}

/// A user-supplied divergence between moment pairs.
///
/// Implementations provide the divergence value and a solver for the linear
/// maximization `max ⟨Γ, Σ⟩` over zero-mean covariances in the ball.
pub trait MomentDivergence: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, candidate: &MomentPair, nominal: &MomentPair) -> Result<DivValue>;
    fn oracle(&self, gamma: &Mat, nominal_cov: &Mat, rho: f64, sigma_ref: &Mat, delta: f64) -> Result<OracleResult>;
}

/// A custom divergence that passed the randomized property gates.
#[derive(Clone)]
pub struct CustomHandle(Arc<dyn MomentDivergence>);

impl fmt::Debug for CustomHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("CustomHandle").field(&self.0.name()).finish()
    }
}

impl PartialEq for CustomHandle {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl CustomHandle {
    pub fn divergence(&self) -> &dyn MomentDivergence {
        self.0.as_ref()
    }
}

/// Settings for the randomized checks run by [`register_custom`].
#[derive(Debug, Clone, Copy)]
pub struct GateConfig {
    pub dim: usize,
    pub radius: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { dim: 2, radius: 0.5, trials: 40, seed: 0 }
    }
}

/// Check a custom divergence on random zero-mean nominals and hand back a
/// handle usable in [`AmbiguityBall`].
///
/// The gates are: the nominal lies in its own ball; sublevel sets are convex
/// along random segments; dropping the mean keeps a feasible pair feasible;
/// the oracle returns a feasible covariance that dominates the nominal and is
/// at least as good as every sampled feasible point.
pub fn register_custom(div: Arc<dyn MomentDivergence>, gates: GateConfig) -> Result<CustomHandle> {
    let fail = |what: &str| Err(Error::Unsupported(format!("custom divergence '{}' fails gate: {what}", div.name())));
    let mut rng = InstanceRng::seed_from_u64(gates.seed);
    let d = gates.dim;
    let rho = gates.radius;
    for _ in 0..gates.trials.max(1) {
        let nominal_cov = random_spd(&mut rng, d, 0.5, 2.0);
        let nominal = MomentPair::zero_mean(&nominal_cov)?;
        if !div.evaluate(&nominal, &nominal)?.within(rho + 1e-9) {
            return fail("nominal outside its own ball");
        }
        let mut feasible = Vec::new();
        for _ in 0..8 {
            let scale = rng.random_range(0.0..1.0);
            let cov = &nominal_cov + random_spd(&mut rng, d, 0.0, 1.0) * scale;
            let mean = DVector::from_fn(d, |_, _| rng.random_range(-0.3..0.3) * scale);
            let cand = MomentPair::from_mean_cov(mean, &cov)?;
            if div.evaluate(&cand, &nominal)?.within(rho) {
                let centered = MomentPair::zero_mean(&cand.second_moment)?;
                if !div.evaluate(&centered, &nominal)?.within(rho + 1e-9) {
                    return fail("dropping the mean leaves the ball");
                }
                feasible.push(cand);
            }
        }
        for pair in feasible.windows(2) {
            let lam = rng.random_range(0.0..1.0);
            let mix = MomentPair::new(
                &pair[0].mean * lam + &pair[1].mean * (1.0 - lam),
                &pair[0].second_moment * lam + &pair[1].second_moment * (1.0 - lam),
            )?;
            if !div.evaluate(&mix, &nominal)?.within(rho + 1e-9) {
                return fail("sublevel set is not convex");
            }
        }
        let gamma = random_spd(&mut rng, d, 0.0, 1.0);
        let res = div.oracle(&gamma, &nominal_cov, rho, &nominal_cov, 0.95)?;
        let star = MomentPair::zero_mean(&res.sigma_star)?;
        if !div.evaluate(&star, &nominal)?.within(rho + 1e-8) {
            return fail("oracle output infeasible");
        }
        if min_eigenvalue(&(&res.sigma_star - &nominal_cov)) < -1e-7 {
            return fail("oracle output does not dominate the nominal");
        }
        let best = crate::matops::inner(&gamma, &res.sigma_star);
        for cand in &feasible {
            if crate::matops::inner(&gamma, &cand.second_moment) > best + 1e-8 * (1.0 + best.abs()) {
                return fail("oracle beaten by a sampled feasible point");
            }
        }
    }
    Ok(CustomHandle(div))
}

/// Which divergence defines a ball.
#[derive(Debug, Clone, PartialEq)]
pub enum DivergenceKind {
    Wasserstein2,
    KullbackLeibler,
    EntropicOt { epsilon: f64 },
    Fisher,
    Custom(CustomHandle),
}

impl DivergenceKind {
    /// `wasserstein`, `kl`, `fisher` or `entropic:<epsilon>`.
    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "wasserstein" | "w2" | "gelbrich" => Ok(DivergenceKind::Wasserstein2),
            "kl" | "kullback-leibler" => Ok(DivergenceKind::KullbackLeibler),
            "fisher" => Ok(DivergenceKind::Fisher),
            _ => match lower.strip_prefix("entropic:") {
                Some(eps) => {
                    let epsilon: f64 =
                        eps.parse().map_err(|_| Error::InvalidInput(format!("bad entropic epsilon '{eps}'")))?;
                    Ok(DivergenceKind::EntropicOt { epsilon })
                }
                None => Err(Error::InvalidInput(format!("unknown divergence '{s}'"))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            DivergenceKind::Wasserstein2 => "wasserstein".into(),
            DivergenceKind::KullbackLeibler => "kl".into(),
            DivergenceKind::Fisher => "fisher".into(),
            DivergenceKind::EntropicOt { epsilon } => format!("entropic:{epsilon}"),
            DivergenceKind::Custom(h) => h.divergence().name().to_string(),
        }
    }
}

/// Divergence of `candidate` from `nominal` under `kind`.
pub fn divergence(kind: &DivergenceKind, candidate: &MomentPair, nominal: &MomentPair) -> Result<DivValue> {
    match kind {
        DivergenceKind::Wasserstein2 => Ok(DivValue::Finite(gelbrich(candidate, nominal)?)),
        DivergenceKind::KullbackLeibler => kl_t_divergence(candidate, nominal),
        DivergenceKind::Fisher => {
            if min_eigenvalue(&candidate.covariance()) <= 0.0 {
                return Ok(DivValue::Infinite);
            }
            Ok(DivValue::Finite(fisher_gaussian(candidate, nominal)?))
        }
        DivergenceKind::EntropicOt { epsilon } => {
            if min_eigenvalue(&candidate.covariance()) <= 0.0 {
                return Ok(DivValue::Infinite);
            }
            let sq = entropic_ot_squared(candidate, nominal, *epsilon)?;
            Ok(DivValue::Finite(sq.max(0.0).sqrt()))
        }
        DivergenceKind::Custom(h) => h.divergence().evaluate(candidate, nominal),
    }
}

/// `{P : D(P, P̂) ≤ ρ}` restricted to Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityBall {
    pub kind: DivergenceKind,
    pub nominal: MomentPair,
    pub radius: f64,
}

impl AmbiguityBall {
    pub fn new(kind: DivergenceKind, nominal: MomentPair, radius: f64) -> Result<Self> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::InvalidInput(format!("radius must be a finite nonnegative number, got {radius}")));
        }
        let cov = nominal.covariance();
        match &kind {
            DivergenceKind::KullbackLeibler | DivergenceKind::Fisher => pd_or_nominal_error(&cov)?,
            DivergenceKind::EntropicOt { epsilon } => {
                pd_or_nominal_error(&cov)?;
                let rho_min = entropic_min_radius(&nominal, *epsilon)?;
                if radius < rho_min {
                    return Err(Error::InvalidInput(format!(
                        "entropic ball is empty: radius {radius} below the minimum {rho_min}"
                    )));
                }
            }
            DivergenceKind::Wasserstein2 | DivergenceKind::Custom(_) => {
                if min_eigenvalue(&cov) < -1e-10 {
                    return Err(Error::InvalidNominal("nominal covariance is not psd".into()));
                }
            }
        }
        Ok(AmbiguityBall { kind, nominal, radius })
    }

    /// Zero-mean ball around `N(0, cov)`.
    pub fn centered(kind: DivergenceKind, cov: &Mat, radius: f64) -> Result<Self> {
        Self::new(kind, MomentPair::zero_mean(cov)?, radius)
    }

    pub fn dim(&self) -> usize {
        self.nominal.dim()
    }
}

/// Smallest radius for which an entropic ball is nonempty; zero when the
/// minimal radicand is not positive.
pub fn entropic_min_radius(nominal: &MomentPair, eps: f64) -> Result<f64> {
    Ok(entropic_min_squared(nominal, eps)?.max(0.0).sqrt())
}

/// Whether the Gaussian with moments `candidate` lies in the ball, up to `tol`.
pub fn membership(ball: &AmbiguityBall, candidate: &MomentPair, tol: f64) -> Result<bool> {
    check_pairs(candidate, &ball.nominal)?;
    if let DivergenceKind::EntropicOt { epsilon } = ball.kind {
        if min_eigenvalue(&candidate.covariance()) <= 0.0 {
            return Ok(false);
        }
        let sq = entropic_ot_squared(candidate, &ball.nominal, epsilon)?;
        return Ok(sq <= (ball.radius + tol).powi(2));
    }
    if let DivergenceKind::Wasserstein2 = ball.kind {
        // The squared distance is a difference of traces; allow for its
        // rounding before comparing, since the square root magnifies it.
        let g = gelbrich(candidate, &ball.nominal)?;
        let traces = candidate.second_moment.trace().abs() + ball.nominal.second_moment.trace().abs();
        return Ok(g * g <= (ball.radius + tol).powi(2) + 64.0 * f64::EPSILON * traces);
    }
    Ok(divergence(&ball.kind, candidate, &ball.nominal)?.within(ball.radius + tol))
}

/// For a zero-mean nominal: `(μ, M)` in the ball implies `(0, M)` in the ball.
pub fn zero_mean_feasibility_check(ball: &AmbiguityBall, candidate: &MomentPair) -> Result<bool> {
    if ball.nominal.mean.amax() != 0.0 {
        return Err(Error::InvalidInput("zero-mean check needs a zero-mean nominal".into()));
    }
    if !membership(ball, candidate, 0.0)? {
        return Ok(true);
    }
    let centered = MomentPair::zero_mean(&candidate.second_moment)?;
    membership(ball, &centered, 1e-12)
}

/// Eigenvalues of `S^{1/2} Γ S^{1/2}` for psd `Γ` and pd `S`, ascending.
pub(crate) fn whitened_spectrum(gamma: &Mat, s: &Mat) -> Result<(DVector<f64>, Mat, Mat)> {
    let root = sym_sqrt(s)?;
    let (vals, vecs) = sym_eigen(&symmetrize(&(&root * gamma * &root)));
    Ok((vals, vecs, root))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(mean: f64, var: f64) -> MomentPair {
        MomentPair::from_mean_cov(DVector::from_element(1, mean), &Mat::from_element(1, 1, var)).unwrap()
    }

    fn diag(values: &[f64]) -> Mat {
        Mat::from_diagonal(&DVector::from_column_slice(values))
    }

    #[test]
    fn gelbrich_closed_forms() {
        let a = MomentPair::zero_mean(&diag(&[1.0, 9.0])).unwrap();
        let b = MomentPair::zero_mean(&diag(&[4.0, 1.0])).unwrap();
        assert!((gelbrich(&a, &b).unwrap() - 5f64.sqrt()).abs() < 1e-10);
        assert!((gelbrich(&scalar(0.0, 1.0), &scalar(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-10);
        assert!(gelbrich(&a, &a).unwrap() < 1e-10);
    }

    #[test]
    fn kl_closed_forms() {
        for d in 1..5 {
            let a = MomentPair::zero_mean(&(Mat::identity(d, d) * 2.0)).unwrap();
            let b = MomentPair::zero_mean(&Mat::identity(d, d)).unwrap();
            let expected = d as f64 * (1.0 - 2f64.ln()) / 2.0;
            assert!((kl_t_divergence(&a, &b).unwrap().finite().unwrap() - expected).abs() < 1e-10);
            assert!(kl_t_divergence(&b, &b).unwrap().finite().unwrap().abs() < 1e-10);
        }
        let shifted = MomentPair::from_mean_cov(DVector::from_column_slice(&[1.0, 0.0]), &Mat::identity(2, 2)).unwrap();
        let base = MomentPair::zero_mean(&Mat::identity(2, 2)).unwrap();
        assert!((kl_t_divergence(&shifted, &base).unwrap().finite().unwrap() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn kl_flags_singular_candidate_and_rejects_singular_nominal() {
        let singular = MomentPair::zero_mean(&diag(&[1.0, 0.0])).unwrap();
        let base = MomentPair::zero_mean(&Mat::identity(2, 2)).unwrap();
        assert_eq!(kl_t_divergence(&singular, &base).unwrap(), DivValue::Infinite);
        assert!(matches!(kl_t_divergence(&base, &singular), Err(Error::InvalidNominal(_))));
    }

    #[test]
    fn fisher_closed_forms() {
        assert!((fisher_gaussian(&scalar(0.0, 2.0), &scalar(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-10);
        let shifted = MomentPair::from_mean_cov(DVector::from_column_slice(&[1.0, 0.0]), &Mat::identity(2, 2)).unwrap();
        let base = MomentPair::zero_mean(&Mat::identity(2, 2)).unwrap();
        assert!((fisher_gaussian(&shifted, &base).unwrap() - 1.0).abs() < 1e-10);
        assert!(fisher_gaussian(&base, &base).unwrap().abs() < 1e-10);
    }

    #[test]
    fn entropic_scalar_by_hand() {
        // Σ = Σ̂ = 1, ε = 1: X = sqrt(1 + 1/16) − 1/4.
        let x = (17f64 / 16.0).sqrt() - 0.25;
        let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
        let expected = 2.0 - 2.0 * x - 0.5 * (2.0 * two_pi_e.ln() + 0.5f64.ln() + x.ln());
        let got = entropic_ot_squared(&scalar(0.0, 1.0), &scalar(0.0, 1.0), 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(got < 0.0);
        assert!(matches!(entropic_ot(&scalar(0.0, 1.0), &scalar(0.0, 1.0), 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn entropic_minimum_is_inflated_nominal() {
        let nominal = scalar(0.0, 1.3);
        let eps = 0.7;
        let at = |s: f64| entropic_ot_squared(&scalar(0.0, s), &nominal, eps).unwrap();
        let best = at(1.3 + eps / 2.0);
        let mut grid_best = (f64::INFINITY, 0.0);
        for k in 1..=4000 {
            let s = k as f64 * 1e-3;
            let v = at(s);
            if v < grid_best.0 {
                grid_best = (v, s);
            }
        }
        assert!((grid_best.1 - 1.65).abs() <= 1e-3);
        assert!(best <= grid_best.0 + 1e-12);
    }

    #[test]
    fn membership_boundaries() {
        let ball = AmbiguityBall::new(DivergenceKind::Wasserstein2, scalar(0.0, 1.0), 1.0).unwrap();
        assert!(membership(&ball, &scalar(0.0, 4.0), 1e-12).unwrap());
        assert!(!membership(&ball, &scalar(0.0, 4.2), 1e-12).unwrap());
        let kl = AmbiguityBall::new(DivergenceKind::KullbackLeibler, scalar(0.0, 1.0), 0.5).unwrap();
        assert!(membership(&kl, &scalar(0.0, 3.146), 1e-3).unwrap());
        assert!(!membership(&kl, &scalar(0.0, 3.3), 1e-3).unwrap());
        for kind in [DivergenceKind::Wasserstein2, DivergenceKind::KullbackLeibler, DivergenceKind::Fisher] {
            let ball = AmbiguityBall::new(kind, scalar(0.0, 1.7), 0.0).unwrap();
            assert!(membership(&ball, &scalar(0.0, 1.7), 1e-12).unwrap());
        }
    }

    #[test]
    fn entropic_ball_needs_minimum_radius() {
        let nominal = MomentPair::zero_mean(&Mat::identity(2, 2)).unwrap();
        // tiny ε: the minimal radicand is positive, so small radii are rejected
        let eps = 1e-3;
        let rho_min = entropic_min_radius(&nominal, eps).unwrap();
        assert!(rho_min > 0.0);
        assert!(AmbiguityBall::new(DivergenceKind::EntropicOt { epsilon: eps }, nominal.clone(), rho_min * 0.5).is_err());
        assert!(AmbiguityBall::new(DivergenceKind::EntropicOt { epsilon: eps }, nominal, rho_min * 1.5).is_ok());
    }

    #[test]
    fn parse_kinds() {
        assert_eq!(DivergenceKind::parse("W2").unwrap(), DivergenceKind::Wasserstein2);
        assert_eq!(DivergenceKind::parse("kl").unwrap(), DivergenceKind::KullbackLeibler);
        assert_eq!(DivergenceKind::parse("entropic:0.5").unwrap(), DivergenceKind::EntropicOt { epsilon: 0.5 });
        assert!(DivergenceKind::parse("hellinger").is_err());
    }

    #[test]
    fn invalid_moment_pairs_rejected() {
        assert!(MomentPair::new(DVector::from_element(1, 2.0), Mat::from_element(1, 1, 1.0)).is_err());
        assert!(MomentPair::new(DVector::zeros(2), Mat::identity(3, 3)).is_err());
    }

    /// Moments bounded by an inflated nominal: `M ⪯ (1 + ρ) Σ̂`.
    struct SpectralBox;

    impl MomentDivergence for SpectralBox {
        fn name(&self) -> &str {
            "spectral-box"
        }
        fn evaluate(&self, c: &MomentPair, n: &MomentPair) -> Result<DivValue> {
            let (vals, vecs, _) = whitened_spectrum(&c.second_moment, &sym_inv(&n.covariance())?)?;
            let _ = vecs;
            Ok(DivValue::Finite((vals.max() - 1.0).max(0.0)))
        }
        fn oracle(&self, gamma: &Mat, nominal: &Mat, rho: f64, sigma_ref: &Mat, _delta: f64) -> Result<OracleResult> {
            let sigma_star = nominal * (1.0 + rho);
            let gain = crate::matops::inner(gamma, &(&sigma_star - sigma_ref));
            Ok(OracleResult { sigma_star, dual_gamma: 0.0, active: true, subopt_delta_achieved: 1.0, objective: gain })
        }
    }

    /// Nonempty only on a shell away from the nominal.
    struct Shell;

    impl MomentDivergence for Shell {
        fn name(&self) -> &str {
            "shell"
        }
        fn evaluate(&self, c: &MomentPair, n: &MomentPair) -> Result<DivValue> {
            Ok(DivValue::Finite((c.second_moment.trace() - n.second_moment.trace() - 1.0).abs()))
        }
        fn oracle(&self, _g: &Mat, nominal: &Mat, _rho: f64, _r: &Mat, _delta: f64) -> Result<OracleResult> {
            Ok(OracleResult {
                sigma_star: nominal.clone(),
                dual_gamma: 0.0,
                active: false,
                subopt_delta_achieved: 1.0,
                objective: 0.0,
            })
        }
    }

    #[test]
    fn custom_registration_gates() {
        let handle = register_custom(Arc::new(SpectralBox), GateConfig::default()).unwrap();
        let kind = DivergenceKind::Custom(handle);
        let ball = AmbiguityBall::new(kind, scalar(0.0, 1.0), 0.5).unwrap();
        assert!(membership(&ball, &scalar(0.0, 1.5), 1e-12).unwrap());
        assert!(!membership(&ball, &scalar(0.0, 1.6), 1e-12).unwrap());
        assert!(matches!(register_custom(Arc::new(Shell), GateConfig::default()), Err(Error::Unsupported(_))));
    }
}
