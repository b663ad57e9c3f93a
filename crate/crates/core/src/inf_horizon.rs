//! Infinite-horizon average-cost LQG with time-invariant data.
//!
//! The control Riccati equation (DARE) and the filter Riccati equation are
//! solved by fixed-point iteration of the finite-horizon recursions. The
//! average cost of `u_t = K x̂_t` comes from the stationary covariance of the
//! joint state `z = (x, e)`, `e = x − x̂`, which obeys
//! `z_{t+1} = F z_t + Ξ ξ_t` with
//!
//! ```text
//! F = [A + BK   −BK       ]    Ξ = [I        0 ]    ξ_t = (w_t, v_{t+1})
//!     [0        A − L C A ]        [I − L C  −L]
//! ```

use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::divergence::AmbiguityBall;
use crate::error::{Error, Result};
use crate::frank_wolfe::{FwConfig, FwRecord, StepRule};
use crate::lqg::SystemInstance;
use crate::matops::{
    ensure_square_finite, inner, min_eigenvalue, solve_discrete_lyapunov, spectral_radius, sym_sqrt, symmetrize, Mat,
};
use crate::oracle::linear_oracle;

/// Relative change between iterates at which a Riccati iteration stops.
pub const ARE_REL_TOL: f64 = 1e-12;
pub const ARE_MAX_ITERS: usize = 100_000;
/// Closed-loop spectral radii must stay below `1 − STABILITY_MARGIN`.
pub const STABILITY_MARGIN: f64 = 1e-8;
/// Finite-difference step relative to `1 + ‖Σ‖_F`.
pub const FD_REL_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct StationarySystem {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub q: Mat,
    pub r: Mat,
}

impl StationarySystem {
    pub fn new(a: Mat, b: Mat, c: Mat, q: Mat, r: Mat) -> Result<Self> {
        let n = a.nrows();
        ensure_square_finite(&a, "A")?;
        ensure_square_finite(&q, "Q")?;
        ensure_square_finite(&r, "R")?;
        if b.nrows() != n || c.ncols() != n || q.nrows() != n || r.nrows() != b.ncols() || c.nrows() == 0 {
            return Err(Error::InvalidInput("stationary system dimensions do not match".into()));
        }
        if b.iter().chain(c.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("B and C must be finite".into()));
        }
        if min_eigenvalue(&q) <= 0.0 || min_eigenvalue(&r) <= 0.0 {
            return Err(Error::InvalidInput("Q and R must be positive definite".into()));
        }
        Ok(StationarySystem { a, b, c, q: symmetrize(&q), r: symmetrize(&r) })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// The same data repeated over a finite horizon (terminal cost `Q`).
    pub fn finite_horizon(&self, horizon: usize) -> Result<SystemInstance> {
        SystemInstance::time_invariant(&self.a, &self.b, &self.c, &self.q, &self.r, horizon)
    }

    /// Finite-horizon data whose optimal cost divided by `horizon` is the
    /// average of the first `horizon` stage costs: no terminal weight.
    pub fn average_cost_horizon(&self, horizon: usize) -> Result<SystemInstance> {
        let mut sys = self.finite_horizon(horizon)?;
        sys.q[horizon] = Mat::zeros(self.n(), self.n());
        Ok(sys)
    }
}

fn iterate_to_fixed_point(init: Mat, what: &'static str, step: impl Fn(&Mat) -> Result<Mat>) -> Result<Mat> {
    let mut x = init;
    for _ in 0..ARE_MAX_ITERS {
        let next = step(&x)?;
        let change = (&next - &x).norm();
        x = next;
        if !x.iter().all(|v| v.is_finite()) {
            break;
        }
        if change <= ARE_REL_TOL * (1.0 + x.norm()) {
            return Ok(x);
        }
    }
    Err(Error::Certificate { what, detail: format!("Riccati iteration did not settle within {ARE_MAX_ITERS} steps") })
}

fn certify_stable(f: &Mat, what: &'static str) -> Result<()> {
    let rho = spectral_radius(f)?;
    if rho >= 1.0 - STABILITY_MARGIN {
        return Err(Error::Certificate { what, detail: format!("closed-loop spectral radius {rho} is not below 1") });
    }
    Ok(())
}

fn solve_spd(m: &Mat, rhs: &Mat, what: &str) -> Result<Mat> {
    let chol = symmetrize(m).cholesky().ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))?;
    Ok(chol.solve(rhs))
}

/// Gain `K = −(R + BᵀPB)⁻¹BᵀPA` and the Riccati map `AᵀPA + Q + AᵀPBK`.
fn riccati_map(ss: &StationarySystem, p: &Mat) -> Result<(Mat, Mat)> {
    let bt_p = ss.b.transpose() * p;
    let k = -solve_spd(&(&ss.r + &bt_p * &ss.b), &(&bt_p * &ss.a), "R + BᵀPB")?;
    let next = ss.a.transpose() * p * &ss.a + &ss.q + ss.a.transpose() * bt_p.transpose() * &k;
    Ok((symmetrize(&next), k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dare {
    pub p: Mat,
    pub k: Mat,
}

pub fn solve_dare(ss: &StationarySystem) -> Result<Dare> {
    solve_dare_from(ss, &ss.q)
}

/// DARE by Riccati iteration started at `init` (any psd matrix).
pub fn solve_dare_from(ss: &StationarySystem, init: &Mat) -> Result<Dare> {
    if init.shape() != ss.q.shape() || min_eigenvalue(init) < -1e-12 {
        return Err(Error::InvalidInput("DARE initialization must be an n×n psd matrix".into()));
    }
    let p = iterate_to_fixed_point(init.clone(), "stabilizability", |p| Ok(riccati_map(ss, p)?.0))?;
    let (_, k) = riccati_map(ss, &p)?;
    certify_stable(&(&ss.a + &ss.b * &k), "stabilizability")?;
    Ok(Dare { p, k })
}

/// `‖P − (AᵀPA + Q − AᵀPB(R + BᵀPB)⁻¹BᵀPA)‖_F`.
pub fn dare_residual(ss: &StationarySystem, p: &Mat) -> Result<f64> {
    Ok((p - riccati_map(ss, p)?.0).norm())
}

/// Prior-covariance map `AΣAᵀ + W − AΣCᵀ(CΣCᵀ + V)⁻¹CΣAᵀ` and the gain
/// `L = ΣCᵀ(CΣCᵀ + V)⁻¹`.
fn filter_map(ss: &StationarySystem, w: &Mat, v: &Mat, s: &Mat) -> Result<(Mat, Mat)> {
    let cs = &ss.c * s;
    let innov = &cs * ss.c.transpose() + v;
    let l = solve_spd(&innov, &cs, "CΣCᵀ + V")?.transpose();
    let filtered = s - &l * &cs;
    Ok((symmetrize(&(&ss.a * filtered * ss.a.transpose() + w)), l))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterAre {
    /// Steady-state prior covariance `Σ̃`.
    pub sigma: Mat,
    pub l: Mat,
}

fn check_noise(ss: &StationarySystem, w: &Mat, v: &Mat) -> Result<()> {
    if w.shape() != (ss.n(), ss.n()) || v.shape() != (ss.p(), ss.p()) {
        return Err(Error::InvalidInput("noise covariances have the wrong shape".into()));
    }
    ensure_square_finite(w, "Σ_w")?;
    ensure_square_finite(v, "Σ_v")?;
    if min_eigenvalue(w) <= 0.0 || min_eigenvalue(v) <= 0.0 {
        return Err(Error::InvalidInput("stationary noise covariances must be positive definite".into()));
    }
    Ok(())
}

pub fn solve_filter_are(ss: &StationarySystem, w: &Mat, v: &Mat) -> Result<FilterAre> {
    check_noise(ss, w, v)?;
    let sigma = iterate_to_fixed_point(w.clone(), "detectability", |s| Ok(filter_map(ss, w, v, s)?.0))?;
    let (_, l) = filter_map(ss, w, v, &sigma)?;
    certify_stable(&(&ss.a - &l * &ss.c * &ss.a), "detectability")?;
    Ok(FilterAre { sigma, l })
}

pub fn filter_are_residual(ss: &StationarySystem, w: &Mat, v: &Mat, sigma: &Mat) -> Result<f64> {
    Ok((sigma - filter_map(ss, w, v, sigma)?.0).norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationarySolution {
    pub p: Mat,
    pub k: Mat,
    pub sigma_tilde: Mat,
    pub l: Mat,
    pub sigma_x: Mat,
    pub sigma_xhat: Mat,
    pub sigma_u: Mat,
    pub avg_cost: f64,
}

pub fn stationary_cost(ss: &StationarySystem, w: &Mat, v: &Mat) -> Result<StationarySolution> {
    stationary_cost_with(ss, &solve_dare(ss)?, w, v)
}

/// Average cost for a precomputed DARE solution.
pub fn stationary_cost_with(ss: &StationarySystem, dare: &Dare, w: &Mat, v: &Mat) -> Result<StationarySolution> {
    let filt = solve_filter_are(ss, w, v)?;
    let (n, p) = (ss.n(), ss.p());
    let bk = &ss.b * &dare.k;
    let mut f = Mat::zeros(2 * n, 2 * n);
    f.view_mut((0, 0), (n, n)).copy_from(&(&ss.a + &bk));
    f.view_mut((0, n), (n, n)).copy_from(&(-&bk));
    f.view_mut((n, n), (n, n)).copy_from(&(&ss.a - &filt.l * &ss.c * &ss.a));
    let rho = spectral_radius(&f)?;
    if rho >= 1.0 - STABILITY_MARGIN {
        return Err(Error::Instability { spectral_radius: rho, bound: 1.0 - STABILITY_MARGIN });
    }
    let mut xi = Mat::zeros(2 * n, n + p);
    xi.view_mut((0, 0), (n, n)).copy_from(&Mat::identity(n, n));
    xi.view_mut((n, 0), (n, n)).copy_from(&(Mat::identity(n, n) - &filt.l * &ss.c));
    xi.view_mut((n, n), (n, p)).copy_from(&(-&filt.l));
    let mut noise = Mat::zeros(n + p, n + p);
    noise.view_mut((0, 0), (n, n)).copy_from(w);
    noise.view_mut((n, n), (p, p)).copy_from(v);
    let sigma_z = solve_discrete_lyapunov(&f, &symmetrize(&(&xi * noise * xi.transpose())))?;
    let sigma_x = sigma_z.view((0, 0), (n, n)).clone_owned();
    let cross = sigma_z.view((0, n), (n, n)).clone_owned();
    let sigma_e = sigma_z.view((n, n), (n, n)).clone_owned();
    let sigma_xhat = symmetrize(&(&sigma_x - &cross - cross.transpose() + sigma_e));
    let sigma_u = symmetrize(&(&dare.k * &sigma_xhat * dare.k.transpose()));
    let avg_cost = inner(&sigma_x, &ss.q) + inner(&sigma_u, &ss.r);
    Ok(StationarySolution {
        p: dare.p.clone(),
        k: dare.k.clone(),
        sigma_tilde: filt.sigma,
        l: filt.l,
        sigma_x,
        sigma_xhat,
        sigma_u,
        avg_cost,
    })
}

/// Long-run average of `xᵀQx + uᵀRu` along one simulated path under the
/// steady-state policy, discarding the first `burn_in` steps.
pub fn simulate_average_cost(
    ss: &StationarySystem,
    sol: &StationarySolution,
    w: &Mat,
    v: &Mat,
    burn_in: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    check_noise(ss, w, v)?;
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be positive".into()));
    }
    let (wf, vf) = (sym_sqrt(w)?, sym_sqrt(v)?);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut draw = |f: &Mat| -> DVector<f64> {
        let d = f.nrows();
        f * DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)))
    };
    let mut x = draw(&wf);
    let mut xhat = &sol.l * (&ss.c * &x + draw(&vf));
    let mut total = 0.0;
    for t in 0..burn_in + steps {
        let u = &sol.k * &xhat;
        if t >= burn_in {
            total += x.dot(&(&ss.q * &x)) + u.dot(&(&ss.r * &u));
        }
        x = &ss.a * &x + &ss.b * &u + draw(&wf);
        let predicted = &ss.a * &xhat + &ss.b * &u;
        let y = &ss.c * &x + draw(&vf);
        xhat = &predicted + &sol.l * (y - &ss.c * &predicted);
    }
    Ok(total / steps as f64)
}

/// Gradient of the average cost in `(Σ_w, Σ_v)` by central differences over
/// the symmetric basis `E_ij + E_ji`.
pub fn stationary_gradient(ss: &StationarySystem, dare: &Dare, w: &Mat, v: &Mat, parallel: bool) -> Result<(Mat, Mat)> {
    let dirs: Vec<(usize, usize, usize)> = [(0, ss.n()), (1, ss.p())]
        .iter()
        .flat_map(|&(blk, d)| (0..d).flat_map(move |i| (i..d).map(move |j| (blk, i, j))))
        .collect();
    let eval = |&(blk, i, j): &(usize, usize, usize)| -> Result<f64> {
        let base = if blk == 0 { w } else { v };
        let h = FD_REL_STEP * (1.0 + base.norm());
        let shifted = |sign: f64| {
            let mut m = base.clone();
            m[(i, j)] += sign * h;
            if i != j {
                m[(j, i)] += sign * h;
            }
            let (ww, vv) = if blk == 0 { (&m, v) } else { (w, &m) };
            stationary_cost_with(ss, dare, ww, vv).map(|s| s.avg_cost)
        };
        let slope = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * h);
        Ok(if i == j { slope } else { slope / 2.0 })
    };
    let slopes: Vec<f64> = if parallel {
        dirs.par_iter().map(eval).collect::<Result<_>>()?
    } else {
        dirs.iter().map(eval).collect::<Result<_>>()?
    };
    let mut grads = [Mat::zeros(ss.n(), ss.n()), Mat::zeros(ss.p(), ss.p())];
    for (&(blk, i, j), g) in dirs.iter().zip(slopes) {
        grads[blk][(i, j)] = g;
        grads[blk][(j, i)] = g;
    }
    let [gw, gv] = grads;
    Ok((gw, gv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryFw {
    pub sigma_w: Mat,
    pub sigma_v: Mat,
    pub records: Vec<FwRecord>,
    pub converged: bool,
}

fn check_ball(ball: &AmbiguityBall, dim: usize, name: &str) -> Result<()> {
    if ball.dim() != dim {
        return Err(Error::InvalidInput(format!("{name} ball has dimension {}, expected {dim}", ball.dim())));
    }
    if ball.nominal.mean.amax() != 0.0 || min_eigenvalue(&ball.nominal.covariance()) <= 0.0 {
        return Err(Error::InvalidNominal(format!("{name} nominal must be zero-mean with positive definite covariance")));
    }
    Ok(())
}

/// Frank-Wolfe over time-invariant `(Σ_w, Σ_v)`, starting at the nominal.
pub fn solve_stationary_fw(
    ss: &StationarySystem,
    ball_w: &AmbiguityBall,
    ball_v: &AmbiguityBall,
    cfg: &FwConfig,
) -> Result<StationaryFw> {
    cfg.validate()?;
    check_ball(ball_w, ss.n(), "process-noise")?;
    check_ball(ball_v, ss.p(), "measurement-noise")?;
    let start = Instant::now();
    let dare = solve_dare(ss)?;
    let (mut w, mut v) = (ball_w.nominal.covariance(), ball_v.nominal.covariance());
    let floors = [min_eigenvalue(&w), min_eigenvalue(&v)];
    let value = |w: &Mat, v: &Mat| stationary_cost_with(ss, &dare, w, v).map(|s| s.avg_cost);
    let mut records = Vec::new();
    let mut converged = false;
    for k in 0..cfg.max_iters {
        let f = value(&w, &v)?;
        let (gw, gv) = stationary_gradient(ss, &dare, &w, &v, cfg.parallel_oracles)?;
        let oracle = |z: usize| {
            let (ball, g, cur) = if z == 0 { (ball_w, &gw, &w) } else { (ball_v, &gv, &v) };
            linear_oracle(ball, g, cur, floors[z], cfg.oracle_delta).map_err(|e| Error::OracleAt { z, source: Box::new(e) })
        };
        let (rw, rv) = if cfg.parallel_oracles { rayon::join(|| oracle(0), || oracle(1)) } else { (oracle(0), oracle(1)) };
        let (rw, rv) = (rw?, rv?);
        let gap = rw.objective + rv.objective;
        let mut record = FwRecord { iter: k, objective: f, fw_gap: gap, step: 0.0, wall_ms: 0.0 };
        if gap <= cfg.gap_tol || k + 1 == cfg.max_iters {
            converged = gap <= cfg.gap_tol;
            record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            records.push(record);
            break;
        }
        let mix = |a: &Mat, b: &Mat, t: f64| symmetrize(&(a * (1.0 - t) + b * t));
        let alpha = match cfg.step_rule {
            StepRule::Vanishing => 2.0 / (2.0 + k as f64),
            StepRule::LineSearchBacktracking => {
                let mut alpha = 1.0;
                while alpha > 1e-12 && value(&mix(&w, &rw.sigma_star, alpha), &mix(&v, &rv.sigma_star, alpha))? < f + 0.5 * alpha * gap {
                    alpha *= 0.5;
                }
                alpha
            }
        };
        w = mix(&w, &rw.sigma_star, alpha);
        v = mix(&v, &rv.sigma_star, alpha);
        record.step = alpha;
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        records.push(record);
    }
    Ok(StationaryFw { sigma_w: w, sigma_v: v, records, converged })
}
