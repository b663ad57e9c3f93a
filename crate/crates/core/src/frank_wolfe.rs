//! Frank-Wolfe over the product of per-noise-term ambiguity balls.
//!
//! Each iteration evaluates the LQG value and its gradient, asks every ball
//! for the maximizer of the linearized objective, and moves the iterate
//! towards those targets.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{membership, AmbiguityBall, DivergenceKind, MomentPair};
use crate::error::{Error, Result};
use crate::grad::{lqg_gradient, GradientProfile};
use crate::lqg::{lqg_value, CovarianceProfile, SystemInstance};
use crate::matops::{min_eigenvalue, Mat};
use crate::oracle::{linear_oracle, OracleResult};

/// Nominal distribution of every noise term together with its ball.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalModel {
    /// One ball per block, in the order `x0, w_0..w_{T-1}, v_0..v_{T-1}`.
    pub balls: Vec<AmbiguityBall>,
}

impl NominalModel {
    /// Zero-mean balls of a common kind and radius around `nominal`.
    pub fn uniform(kind: DivergenceKind, nominal: &CovarianceProfile, radius: f64) -> Result<Self> {
        let balls = nominal
            .blocks()
            .map(|cov| AmbiguityBall::centered(kind.clone(), cov, radius))
            .collect::<Result<_>>()?;
        Ok(NominalModel { balls })
    }

    pub fn horizon(&self) -> usize {
        (self.balls.len() - 1) / 2
    }

    pub fn nominal_profile(&self) -> CovarianceProfile {
        CovarianceProfile::from_blocks(self.balls.iter().map(|b| b.nominal.covariance()).collect())
            .expect("ball count is odd by construction")
    }

    /// Eigenvalue floor per block: 0 for the initial state and process noise,
    /// `λ_min(Σ̂_v)` for measurement noise.
    pub fn floors(&self) -> Vec<f64> {
        let t = self.horizon();
        self.balls
            .iter()
            .enumerate()
            .map(|(z, b)| if z > t { min_eigenvalue(&b.nominal.covariance()) } else { 0.0 })
            .collect()
    }

    pub fn with_radius(&self, radius: f64) -> Result<Self> {
        let balls = self
            .balls
            .iter()
            .map(|b| AmbiguityBall::new(b.kind.clone(), b.nominal.clone(), radius))
            .collect::<Result<_>>()?;
        Ok(NominalModel { balls })
    }

    fn validate(&self, sys: &SystemInstance) -> Result<()> {
        if self.balls.len() != 2 * sys.horizon() + 1 {
            return Err(Error::InvalidInput(format!(
                "expected {} balls, got {}",
                2 * sys.horizon() + 1,
                self.balls.len()
            )));
        }
        Ok(())
    }

    /// Whether every block of `profile` lies in its ball.
    pub fn contains(&self, profile: &CovarianceProfile, tol: f64) -> Result<bool> {
        for (ball, blk) in self.balls.iter().zip(profile.blocks()) {
            if !membership(ball, &MomentPair::zero_mean(blk)?, tol)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `2 / (2 + k)`.
    Vanishing,
    /// Halve from 1 until the increase is at least half the linear prediction.
    LineSearchBacktracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FwConfig {
    pub max_iters: usize,
    pub gap_tol: f64,
    pub oracle_delta: f64,
    pub step_rule: StepRule,
    pub parallel_oracles: bool,
    pub seed: u64,
}

impl Default for FwConfig {
    fn default() -> Self {
        FwConfig {
            max_iters: 500,
            gap_tol: 1e-3,
            oracle_delta: 0.95,
            step_rule: StepRule::Vanishing,
            parallel_oracles: true,
            seed: 0,
        }
    }
}

impl FwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gap_tol > 0.0) {
            return Err(Error::InvalidInput("gap_tol must be positive".into()));
        }
        if !(self.oracle_delta > 0.0 && self.oracle_delta < 1.0) {
            return Err(Error::InvalidInput("oracle_delta must lie in (0, 1)".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// One Frank-Wolfe iteration. `step` is the step taken from this iterate
/// (0 on the last row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FwRecord {
    pub iter: usize,
    pub objective: f64,
    pub fw_gap: f64,
    pub step: f64,
    pub wall_ms: f64,
}

impl FwRecord {
    /// Gap relative to the objective.
    pub fn relative_gap(&self) -> f64 {
        self.fw_gap / self.objective.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FwTrace {
    pub records: Vec<FwRecord>,
    pub final_profile: CovarianceProfile,
    pub converged: bool,
}

impl FwTrace {
    /// Number of gradient and oracle rounds.
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn final_gap(&self) -> f64 {
        self.records.last().map_or(f64::INFINITY, |r| r.fw_gap)
    }

    pub fn final_objective(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.objective)
    }

    /// CSV with columns `iter, objective, fw_gap, step, wall_ms`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::output::write_csv(path, &self.records)
    }
}

fn run_oracles(
    model: &NominalModel,
    grad: &GradientProfile,
    current: &CovarianceProfile,
    floors: &[f64],
    delta: f64,
    parallel: bool,
) -> Result<Vec<OracleResult>> {
    let one = |z: usize| {
        linear_oracle(&model.balls[z], grad.block(z), current.block(z), floors[z], delta)
            .map_err(|e| Error::OracleAt { z, source: Box::new(e) })
    };
    let n = model.balls.len();
    // collect preserves index order, so results do not depend on scheduling
    if parallel {
        (0..n).into_par_iter().map(one).collect()
    } else {
        (0..n).map(one).collect()
    }
}

/// Surrogate duality gap `Σ_z ⟨∇_z f, Σ⋆_z − Σ_z⟩` and the oracle targets.
pub fn fw_gap(
    sys: &SystemInstance,
    model: &NominalModel,
    current: &CovarianceProfile,
    delta: f64,
) -> Result<(f64, CovarianceProfile)> {
    model.validate(sys)?;
    let (_, grad) = lqg_gradient(sys, current)?;
    let results = run_oracles(model, &grad, current, &model.floors(), delta, true)?;
    let gap = results.iter().map(|r| r.objective).sum();
    let targets = CovarianceProfile::from_blocks(results.into_iter().map(|r| r.sigma_star).collect())?;
    Ok((gap, targets))
}

const ARMIJO_FRACTION: f64 = 0.5;
const MIN_STEP: f64 = 1e-12;

/// Maximize the LQG value over the product of balls.
///
/// Starts from `init` (the nominal profile when `None`) and stops when the
/// surrogate gap drops to `cfg.gap_tol` or after `cfg.max_iters` rounds.
pub fn solve(
    sys: &SystemInstance,
    model: &NominalModel,
    init: Option<&CovarianceProfile>,
    cfg: &FwConfig,
) -> Result<(CovarianceProfile, FwTrace)> {
    cfg.validate()?;
    sys.validate()?;
    model.validate(sys)?;
    let start = Instant::now();
    let mut current = match init {
        Some(p) => p.clone(),
        None => model.nominal_profile(),
    };
    current.validate(sys)?;
    for (z, (ball, blk)) in model.balls.iter().zip(current.blocks()).enumerate() {
        if !membership(ball, &MomentPair::zero_mean(blk)?, 1e-8)? {
            return Err(Error::InvalidInit { z });
        }
    }
    let floors = model.floors();
    let mut records = Vec::new();
    let mut converged = false;
    for k in 0..cfg.max_iters {
        let (value, grad) = lqg_gradient(sys, &current)?;
        let results = run_oracles(model, &grad, &current, &floors, cfg.oracle_delta, cfg.parallel_oracles)?;
        let gap: f64 = results.iter().map(|r| r.objective).sum();
        let mut record = FwRecord { iter: k, objective: value, fw_gap: gap, step: 0.0, wall_ms: 0.0 };
        if gap <= cfg.gap_tol || k + 1 == cfg.max_iters {
            converged = gap <= cfg.gap_tol;
            record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            records.push(record);
            break;
        }
        let targets = CovarianceProfile::from_blocks(results.into_iter().map(|r| r.sigma_star).collect())?;
        let (alpha, next) = match cfg.step_rule {
            StepRule::Vanishing => {
                let alpha = 2.0 / (2.0 + k as f64);
                (alpha, current.step_towards(&targets, alpha))
            }
            StepRule::LineSearchBacktracking => backtrack(sys, &current, &targets, value, gap)?,
        };
        record.step = alpha;
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        records.push(record);
        current = next;
    }
    let trace = FwTrace { records, final_profile: current.clone(), converged };
    Ok((current, trace))
}

fn backtrack(
    sys: &SystemInstance,
    current: &CovarianceProfile,
    targets: &CovarianceProfile,
    value: f64,
    gap: f64,
) -> Result<(f64, CovarianceProfile)> {
    let mut alpha = 1.0;
    loop {
        let candidate = current.step_towards(targets, alpha);
        let f = lqg_value(sys, &candidate)?.cost;
        if f >= value + ARMIJO_FRACTION * alpha * gap || alpha <= MIN_STEP {
            return Ok((alpha, candidate));
        }
        alpha *= 0.5;
    }
}

/// Smallest `λ_min(Σ_z − Σ̂_z)` over all blocks.
pub fn min_dominance_margin(model: &NominalModel, profile: &CovarianceProfile) -> f64 {
    model
        .balls
        .iter()
        .zip(profile.blocks())
        .map(|(b, s): (&AmbiguityBall, &Mat)| min_eigenvalue(&(s - b.nominal.covariance())))
        .fold(f64::INFINITY, f64::min)
}
