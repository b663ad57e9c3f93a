//! Direction-finding oracles: `max ⟨Γ, Σ − Σ_ref⟩` over one ambiguity ball.
//!
//! The Wasserstein and KL oracles reduce to a scalar dual variable `γ` found
//! by bisection. All matrix functions of `γ` are evaluated in a fixed
//! eigenbasis so each bisection step costs `O(d)`.

use nalgebra::DVector;

use crate::divergence::{membership, whitened_spectrum, AmbiguityBall, DivergenceKind, MomentPair};
use crate::error::{Error, Result};
use crate::matops::{inner, max_eigenvalue, min_eigenvalue, sym_apply, sym_eigen, sym_inv, symmetrize, Mat};

/// Gradient eigenvalues below this are treated as rounding and clamped to 0.
pub const GRADIENT_CLAMP: f64 = 1e-8;
/// Bisection stops once the bracket is narrower than this fraction of its top.
pub const BRACKET_REL_WIDTH: f64 = 1e-12;
pub const MAX_BISECTION_STEPS: usize = 200;
const MAX_DOUBLINGS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub sigma_star: Mat,
    /// Optimal multiplier of the divergence constraint (0 when inactive).
    pub dual_gamma: f64,
    /// Whether the divergence constraint is tight at `sigma_star`.
    pub active: bool,
    /// Ratio of the attained objective to the dual bound, in `(0, 1]`.
    pub subopt_delta_achieved: f64,
    /// `⟨Γ, Σ⋆ − Σ_ref⟩`.
    pub objective: f64,
}

impl OracleResult {
    fn nominal(nominal: &Mat, gamma: &Mat, sigma_ref: &Mat) -> Self {
        OracleResult {
            sigma_star: nominal.clone(),
            dual_gamma: 0.0,
            active: false,
            subopt_delta_achieved: 1.0,
            objective: inner(gamma, &(nominal - sigma_ref)),
        }
    }
}

/// Clamp eigenvalues in `[−1e-8, 0)` to zero; anything more negative is an error.
pub fn clamp_gradient(gamma: &Mat) -> Result<Mat> {
    let (vals, vecs) = sym_eigen(&symmetrize(gamma));
    let scale = 1.0f64.max(vals.amax());
    if vals.min() < -GRADIENT_CLAMP * scale {
        return Err(Error::InvalidGradient { min_eigenvalue: vals.min() });
    }
    if vals.min() >= 0.0 {
        return Ok(symmetrize(gamma));
    }
    Ok(sym_apply(&vals, &vecs, |x| x.max(0.0)))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!("oracle precision must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// `primal / dual`, treating differences at the rounding level of `scale`
/// (the magnitude of the inner products involved) as exact agreement.
fn delta_achieved(primal: f64, dual: f64, scale: f64) -> f64 {
    if dual <= f64::MIN_POSITIVE || primal >= dual - 1e-10 * scale {
        1.0
    } else {
        (primal / dual).max(f64::MIN_POSITIVE)
    }
}

fn rounding_scale(gamma: &Mat, sigma_star: &Mat, sigma_ref: &Mat) -> f64 {
    inner(gamma, sigma_star).abs() + inner(gamma, sigma_ref).abs()
}

/// Bisect a nondecreasing `slope` on `[lo, hi]` (`slope(lo) ≤ 0 ≤ slope(hi)`),
/// returning the upper end of the final bracket, where the slope is positive.
fn bisect_upper(mut lo: f64, mut hi: f64, slope: impl Fn(f64) -> f64, what: &str) -> Result<f64> {
    let width = BRACKET_REL_WIDTH * hi;
    for _ in 0..MAX_BISECTION_STEPS {
        if hi - lo <= width {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(hi);
        }
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::OracleFailure(format!("{what} bisection did not terminate in {MAX_BISECTION_STEPS} steps")))
}

/// Dual function of the Gelbrich-ball oracle in the eigenbasis of `Γ`.
#[derive(Debug, Clone)]
pub struct WassersteinDual {
    lambda: DVector<f64>,
    vectors: Mat,
    rotated_nominal: Mat,
    s: DVector<f64>,
    rho: f64,
    ref_value: f64,
}

impl WassersteinDual {
    pub fn new(gamma: &Mat, nominal: &Mat, rho: f64, sigma_ref: &Mat) -> Self {
        let (lambda, vectors) = sym_eigen(gamma);
        let rotated_nominal = symmetrize(&(vectors.transpose() * nominal * &vectors));
        let s = rotated_nominal.diagonal();
        WassersteinDual { lambda, vectors, rotated_nominal, s, rho, ref_value: inner(gamma, sigma_ref) }
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda.max()
    }

    /// `(γ̲, γ̄)`.
    pub fn bounds(&self) -> (f64, f64) {
        let l1 = self.lambda_max();
        let top = self.lambda.len() - 1;
        let along_top = self.s[top].max(0.0).sqrt();
        let trace = self.s.sum().max(0.0).sqrt();
        (l1 * (1.0 + along_top / self.rho), l1 * (1.0 + trace / self.rho))
    }

    pub fn value(&self, g: f64) -> f64 {
        let sum: f64 = self.lambda.iter().zip(self.s.iter()).map(|(l, s)| s * l / (g - l)).sum();
        g * (self.rho * self.rho + sum) - self.ref_value
    }

    pub fn slope(&self, g: f64) -> f64 {
        let sum: f64 = self.lambda.iter().zip(self.s.iter()).map(|(l, s)| s * (l / (g - l)).powi(2)).sum();
        self.rho * self.rho - sum
    }

    /// `γ² (γI − Γ)⁻¹ Σ̂ (γI − Γ)⁻¹`.
    pub fn primal(&self, g: f64) -> Mat {
        let scale = self.lambda.map(|l| g / (g - l));
        let mut inner_m = self.rotated_nominal.clone();
        for i in 0..scale.len() {
            for j in 0..scale.len() {
                inner_m[(i, j)] *= scale[i] * scale[j];
            }
        }
        symmetrize(&(&self.vectors * inner_m * self.vectors.transpose()))
    }
}

/// Gelbrich-ball oracle with the floor constraint `Σ ⪰ λ_floor I`.
pub fn wasserstein_oracle(
    gamma: &Mat,
    nominal: &Mat,
    rho: f64,
    sigma_ref: &Mat,
    floor: f64,
    delta: f64,
) -> Result<OracleResult> {
    check_delta(delta)?;
    let gamma = clamp_gradient(gamma)?;
    if rho <= 0.0 || max_eigenvalue(&gamma) <= 0.0 {
        return Ok(OracleResult::nominal(nominal, &gamma, sigma_ref));
    }
    if floor > min_eigenvalue(nominal) + 1e-10 {
        return Err(Error::Unsupported(format!(
            "floor {floor} above the nominal's smallest eigenvalue; only the default floor is supported"
        )));
    }
    let dual = WassersteinDual::new(&gamma, nominal, rho, sigma_ref);
    let (lo, hi) = dual.bounds();
    let g = if hi - lo <= BRACKET_REL_WIDTH * hi { hi } else { bisect_upper(lo, hi, |g| dual.slope(g), "Wasserstein")? };
    let sigma_star = dual.primal(g);
    let objective = inner(&gamma, &(&sigma_star - sigma_ref));
    let achieved = delta_achieved(objective, dual.value(g), rounding_scale(&gamma, &sigma_star, sigma_ref));
    if achieved < delta {
        return Err(Error::OracleFailure(format!("Wasserstein oracle reached only δ = {achieved}")));
    }
    Ok(OracleResult { sigma_star, dual_gamma: g, active: true, subopt_delta_achieved: achieved, objective })
}

/// Dual function of the KL-ball oracle in the eigenbasis of `Σ̂^{1/2} Γ Σ̂^{1/2}`.
#[derive(Debug, Clone)]
pub struct KlDual {
    lambda: DVector<f64>,
    vectors: Mat,
    root: Mat,
    rho: f64,
    ref_value: f64,
}

impl KlDual {
    pub fn new(gamma: &Mat, nominal: &Mat, rho: f64, sigma_ref: &Mat) -> Result<Self> {
        let (lambda, vectors, root) = whitened_spectrum(gamma, nominal)?;
        Ok(KlDual { lambda: lambda.map(|l| l.max(0.0)), vectors, root, rho, ref_value: inner(gamma, sigma_ref) })
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda.max()
    }

    /// `(λ₁, λ₁(1 + d/ρ))`; the root lies strictly above the lower end.
    pub fn bounds(&self) -> (f64, f64) {
        let l1 = self.lambda_max();
        (l1, l1 * (1.0 + self.lambda.len() as f64 / self.rho))
    }

    /// `Σ log(1 − λ_i/γ) + Σ λ_i/(γ − λ_i)`, twice the divergence of the primal point.
    pub fn residual(&self, g: f64) -> f64 {
        self.lambda.iter().map(|&l| (-l / g).ln_1p() + l / (g - l)).sum()
    }

    pub fn slope(&self, g: f64) -> f64 {
        2.0 * self.rho - self.residual(g)
    }

    pub fn value(&self, g: f64) -> f64 {
        let logdet: f64 = self.lambda.iter().map(|&l| (-l / g).ln_1p()).sum();
        2.0 * g * self.rho - g * logdet - self.ref_value
    }

    /// `γ Σ̂^{1/2} (γI − S)⁻¹ Σ̂^{1/2}`.
    pub fn primal(&self, g: f64) -> Mat {
        let mid = sym_apply(&self.lambda, &self.vectors, |l| g / (g - l));
        symmetrize(&(&self.root * mid * &self.root))
    }
}

/// KL-ball oracle.
pub fn kl_oracle(gamma: &Mat, nominal: &Mat, rho: f64, sigma_ref: &Mat, delta: f64) -> Result<OracleResult> {
    check_delta(delta)?;
    let gamma = clamp_gradient(gamma)?;
    if rho <= 0.0 || max_eigenvalue(&gamma) <= 0.0 {
        return Ok(OracleResult::nominal(nominal, &gamma, sigma_ref));
    }
    let dual = KlDual::new(&gamma, nominal, rho, sigma_ref)?;
    let (lo, mut hi) = dual.bounds();
    let mut grown = 0;
    while dual.slope(hi) < 0.0 {
        // only reachable through rounding at the printed upper bound
        hi *= 2.0;
        grown += 1;
        if grown > MAX_DOUBLINGS {
            return Err(Error::OracleFailure("KL upper bracket not found".into()));
        }
    }
    let g = bisect_upper(lo, hi, |g| dual.slope(g), "KL")?;
    let sigma_star = dual.primal(g);
    let objective = inner(&gamma, &(&sigma_star - sigma_ref));
    let achieved = delta_achieved(objective, dual.value(g), rounding_scale(&gamma, &sigma_star, sigma_ref));
    if achieved < delta {
        return Err(Error::OracleFailure(format!("KL oracle reached only δ = {achieved}")));
    }
    Ok(OracleResult { sigma_star, dual_gamma: g, active: true, subopt_delta_achieved: achieved, objective })
}

/// Stationary point `Σ(γ) = (Σ̂⁻² − Γ/γ)^{-1/2}` of the Fisher-ball Lagrangian.
#[derive(Debug, Clone)]
pub struct FisherPath {
    nominal_inv: Mat,
    nominal_inv_sq: Mat,
    gamma: Mat,
    rho: f64,
    ref_value: f64,
}

impl FisherPath {
    pub fn new(gamma: &Mat, nominal: &Mat, rho: f64, sigma_ref: &Mat) -> Result<Self> {
        let nominal_inv = sym_inv(nominal)?;
        let nominal_inv_sq = symmetrize(&(&nominal_inv * &nominal_inv));
        Ok(FisherPath { nominal_inv, nominal_inv_sq, gamma: gamma.clone(), rho, ref_value: inner(gamma, sigma_ref) })
    }

    /// `λ_max(Σ̂ Γ Σ̂)`: `Σ(γ)` exists for `γ` above this.
    pub fn lower_bound(&self, nominal: &Mat) -> f64 {
        max_eigenvalue(&symmetrize(&(nominal * &self.gamma * nominal)))
    }

    /// `(Σ(γ), Σ(γ)⁻¹)`, or `None` when `Σ̂⁻² − Γ/γ` is not pd.
    pub fn point(&self, g: f64) -> Option<(Mat, Mat)> {
        let n = symmetrize(&(&self.nominal_inv_sq - &self.gamma / g));
        let (vals, vecs) = sym_eigen(&n);
        if vals.min() <= 0.0 {
            return None;
        }
        Some((sym_apply(&vals, &vecs, |x| x.powf(-0.5)), sym_apply(&vals, &vecs, f64::sqrt)))
    }

    /// Fisher divergence of `N(0, Σ(γ))` from `N(0, Σ̂)`.
    pub fn divergence(&self, sigma: &Mat, sigma_inv: &Mat) -> f64 {
        (&self.nominal_inv_sq * sigma).trace() - 2.0 * self.nominal_inv.trace() + sigma_inv.trace()
    }

    /// Lagrangian dual bound at `γ`.
    pub fn value(&self, g: f64) -> Option<f64> {
        let (s, s_inv) = self.point(g)?;
        Some(inner(&self.gamma, &s) - g * (self.divergence(&s, &s_inv) - self.rho) - self.ref_value)
    }
}

/// Fisher-ball oracle by inverting the stationarity condition `Γ = γ ∇g(Σ)`.
pub fn fisher_oracle(gamma: &Mat, nominal: &Mat, rho: f64, sigma_ref: &Mat, delta: f64) -> Result<OracleResult> {
    check_delta(delta)?;
    let gamma = clamp_gradient(gamma)?;
    if rho <= 0.0 || max_eigenvalue(&gamma) <= 0.0 {
        return Ok(OracleResult::nominal(nominal, &gamma, sigma_ref));
    }
    let path = FisherPath::new(&gamma, nominal, rho, sigma_ref)?;
    let lo = path.lower_bound(nominal);
    // excess(γ) = g(Σ(γ)) − ρ decreases in γ; +∞ at the lower end.
    let excess = |g: f64| match path.point(g) {
        Some((s, s_inv)) => path.divergence(&s, &s_inv) - rho,
        None => f64::INFINITY,
    };
    let mut hi = 2.0 * lo;
    let mut doublings = 0;
    while !(excess(hi) < 0.0) {
        hi *= 2.0;
        doublings += 1;
        if doublings > MAX_DOUBLINGS {
            return Err(Error::OracleFailure(format!("Fisher bracket not found within {MAX_DOUBLINGS} doublings")));
        }
    }
    let g = bisect_upper(lo, hi, |g| -excess(g), "Fisher")?;
    let (sigma_star, _) = path
        .point(g)
        .ok_or_else(|| Error::OracleFailure("Fisher stationary point left the domain".into()))?;
    let objective = inner(&gamma, &(&sigma_star - sigma_ref));
    let dual = path.value(g).unwrap_or(objective);
    let achieved = delta_achieved(objective, dual, rounding_scale(&gamma, &sigma_star, sigma_ref));
    if achieved < delta {
        return Err(Error::OracleFailure(format!("Fisher oracle reached only δ = {achieved}")));
    }
    Ok(OracleResult { sigma_star, dual_gamma: g, active: true, subopt_delta_achieved: achieved, objective })
}

/// Solve the direction-finding problem for one ball.
///
/// `floor` is the smallest admissible eigenvalue; it is enforced by the
/// Wasserstein oracle and checked for the others, whose outputs dominate the
/// nominal.
pub fn linear_oracle(ball: &AmbiguityBall, gamma: &Mat, sigma_ref: &Mat, floor: f64, delta: f64) -> Result<OracleResult> {
    if ball.nominal.mean.amax() != 0.0 {
        return Err(Error::InvalidNominal("oracles need a zero-mean nominal".into()));
    }
    let nominal = ball.nominal.covariance();
    let res = match &ball.kind {
        DivergenceKind::Wasserstein2 => wasserstein_oracle(gamma, &nominal, ball.radius, sigma_ref, floor, delta)?,
        DivergenceKind::KullbackLeibler => kl_oracle(gamma, &nominal, ball.radius, sigma_ref, delta)?,
        DivergenceKind::Fisher => fisher_oracle(gamma, &nominal, ball.radius, sigma_ref, delta)?,
        DivergenceKind::EntropicOt { .. } => {
            return Err(Error::Unsupported("no linearization oracle for the entropic OT ball".into()))
        }
        DivergenceKind::Custom(h) => h.divergence().oracle(gamma, &nominal, ball.radius, sigma_ref, delta)?,
    };
    if min_eigenvalue(&res.sigma_star) < floor - 1e-10 {
        return Err(Error::OracleFailure(format!(
            "oracle output violates the eigenvalue floor {floor} (min eigenvalue {})",
            min_eigenvalue(&res.sigma_star)
        )));
    }
    Ok(res)
}

/// Grid search over covariances that are diagonal in the common eigenbasis of
/// a commuting pair `(Γ, Σ̂)`, with feasibility decided by [`membership`].
///
/// The last coordinate is pushed to the ball boundary by bisection; the others
/// are searched on a grid that is refined around the incumbent until its
/// spacing drops below `grid_resolution`.
pub fn brute_force_oracle(gamma: &Mat, ball: &AmbiguityBall, sigma_ref: &Mat, grid_resolution: f64) -> Result<OracleResult> {
    let d = ball.dim();
    if d > 3 {
        return Err(Error::Unsupported(format!("brute-force oracle limited to d ≤ 3, got {d}")));
    }
    if !(grid_resolution > 0.0) {
        return Err(Error::InvalidInput("grid resolution must be positive".into()));
    }
    let gamma = clamp_gradient(gamma)?;
    let nominal = ball.nominal.covariance();
    let scale = 1.0 + gamma.norm() + nominal.norm();
    if (&gamma * &nominal - &nominal * &gamma).norm() > 1e-9 * scale * scale {
        return Err(Error::Unsupported("brute-force oracle needs commuting Γ and Σ̂".into()));
    }
    if max_eigenvalue(&gamma) <= 0.0 || ball.radius <= 0.0 {
        return Ok(OracleResult::nominal(&nominal, &gamma, sigma_ref));
    }
    // A generic combination of commuting matrices has their common eigenbasis.
    let (_, basis) = sym_eigen(&symmetrize(&(&gamma + &nominal * std::f64::consts::SQRT_2)));
    let g_diag = (basis.transpose() * &gamma * &basis).diagonal();
    let s_diag = (basis.transpose() * &nominal * &basis).diagonal();
    let to_matrix = |x: &[f64]| symmetrize(&(&basis * Mat::from_diagonal(&DVector::from_column_slice(x)) * basis.transpose()));
    let feasible = |x: &[f64]| -> Result<bool> {
        if x.iter().any(|&v| v < 0.0) {
            return Ok(false);
        }
        membership(ball, &MomentPair::zero_mean(&to_matrix(x))?, 0.0)
    };
    // Largest feasible value of coordinate k, other coordinates fixed.
    let push = |x: &mut Vec<f64>, k: usize| -> Result<bool> {
        if !feasible(x)? {
            return Ok(false);
        }
        let mut lo = x[k];
        let mut hi = (2.0 * x[k]).max(1.0);
        loop {
            x[k] = hi;
            if !feasible(x)? {
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
        while hi - lo > 1e-12 * hi {
            let mid = 0.5 * (lo + hi);
            x[k] = mid;
            if feasible(x)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        x[k] = lo;
        Ok(true)
    };
    let objective = |x: &[f64]| x.iter().zip(g_diag.iter()).map(|(a, b)| a * b).sum::<f64>();
    // Range of each searched coordinate with the others at the nominal.
    let last = d - 1;
    let mut ranges = Vec::new();
    for k in 0..last {
        let mut x: Vec<f64> = s_diag.iter().copied().collect();
        push(&mut x, k)?;
        let hi = x[k];
        let mut lo_x: Vec<f64> = s_diag.iter().copied().collect();
        let (mut a, mut b) = (0.0, s_diag[k]);
        while b - a > 1e-12 * s_diag[k] {
            let mid = 0.5 * (a + b);
            lo_x[k] = mid;
            if feasible(&lo_x)? {
                b = mid;
            } else {
                a = mid;
            }
        }
        ranges.push((b, hi));
    }
    let points_per_axis = 11usize;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut window = ranges.clone();
    loop {
        let steps: Vec<f64> = window.iter().map(|(a, b)| (b - a) / (points_per_axis - 1) as f64).collect();
        let total = points_per_axis.pow(last as u32);
        for idx in 0..total {
            let mut x: Vec<f64> = s_diag.iter().copied().collect();
            let mut rem = idx;
            for k in 0..last {
                x[k] = window[k].0 + steps[k] * (rem % points_per_axis) as f64;
                rem /= points_per_axis;
            }
            x[last] = s_diag[last];
            // the nominal value of the last coordinate minimizes its divergence term
            if !push(&mut x, last)? {
                continue;
            }
            let val = objective(&x);
            if best.as_ref().is_none_or(|(b, _)| val > *b) {
                best = Some((val, x));
            }
        }
        let max_step = steps.iter().copied().fold(0.0, f64::max);
        if last == 0 || max_step <= grid_resolution {
            break;
        }
        let centre = best.as_ref().map(|(_, x)| x.clone()).unwrap_or_else(|| s_diag.iter().copied().collect());
        window = (0..last)
            .map(|k| {
                let (a, b) = ranges[k];
                ((centre[k] - 1.5 * steps[k]).max(a), (centre[k] + 1.5 * steps[k]).min(b))
            })
            .collect();
        if last == 0 {
            break;
        }
    }
    let (_, x) = best.ok_or_else(|| Error::OracleFailure("brute-force grid found no feasible point".into()))?;
    let sigma_star = to_matrix(&x);
    let objective = inner(&gamma, &(&sigma_star - sigma_ref));
    Ok(OracleResult { sigma_star, dual_gamma: 0.0, active: true, subopt_delta_achieved: 1.0, objective })
}
