//! Experiment driver behind the `drlq` binary: the random instance family,
//! the JSON configuration, and the CSV/JSON outputs of each experiment.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::divergence::{AmbiguityBall, DivergenceKind};
use crate::error::{Error, Result};
use crate::frank_wolfe::{min_dominance_margin, solve, FwConfig, NominalModel, StepRule};
use crate::inf_horizon::{solve_stationary_fw, stationary_cost, StationarySystem};
use crate::lqg::{lqg_value, CovarianceProfile, SystemInstance};
use crate::matops::{min_eigenvalue, Mat};
use crate::output::{write_atomic, write_csv};
use crate::random::{random_profile, InstanceRng, RNG_ID};
use crate::stacked::{affine_objective, build_stacked, fixed_policy_worst_case, kalman_policy_to_purified, StackedMoments};

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Convergence,
    Runtime,
    Gaps,
    InfiniteHorizon,
    SingleSolve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RhoSpec {
    One(f64),
    Many(Vec<f64>),
}

impl RhoSpec {
    pub fn values(&self) -> Vec<f64> {
        match self {
            RhoSpec::One(r) => vec![*r],
            RhoSpec::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub experiment: Experiment,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    /// Horizons swept by the convergence and runtime experiments; `[T]` when empty.
    #[serde(default)]
    pub horizons: Vec<usize>,
    pub divergence: String,
    pub rho: RhoSpec,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub fw: FwConfig,
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub jobs: usize,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    /// Default grid, sizes and solver settings for each experiment.
    pub fn preset(experiment: Experiment) -> Self {
        let base = ExperimentConfig {
            schema: CONFIG_SCHEMA,
            experiment,
            d: 10,
            horizon: 10,
            horizons: Vec::new(),
            divergence: "wasserstein".into(),
            rho: RhoSpec::One(0.1),
            seeds: (0..10).collect(),
            fw: FwConfig::default(),
            output_dir: PathBuf::from("out"),
            jobs: 1,
        };
        match experiment {
            Experiment::Convergence | Experiment::SingleSolve => base,
            Experiment::Runtime => ExperimentConfig { horizons: vec![2, 4, 6, 8, 10], ..base },
            Experiment::Gaps => ExperimentConfig {
                d: 2,
                horizon: 2,
                rho: RhoSpec::Many((0..=10).map(f64::from).collect()),
                fw: FwConfig { gap_tol: 1e-8, step_rule: StepRule::LineSearchBacktracking, ..FwConfig::default() },
                ..base
            },
            Experiment::InfiniteHorizon => ExperimentConfig {
                d: 2,
                horizon: 1,
                rho: RhoSpec::Many(vec![0.0, 0.25, 0.5, 1.0]),
                fw: FwConfig { gap_tol: 1e-6, step_rule: StepRule::LineSearchBacktracking, ..FwConfig::default() },
                ..base
            },
        }
    }

    /// Parse a JSON document; the `schema` field must be present and equal to
    /// [`CONFIG_SCHEMA`].
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema").and_then(|s| s.as_u64()) {
            Some(s) if s == u64::from(CONFIG_SCHEMA) => {}
            Some(s) => return Err(Error::InvalidInput(format!("unsupported config schema {s}, expected {CONFIG_SCHEMA}"))),
            None => return Err(Error::InvalidInput("config is missing the \"schema\" field".into())),
        }
        let cfg: ExperimentConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kind(&self) -> Result<DivergenceKind> {
        DivergenceKind::parse(&self.divergence)
    }

    pub fn horizon_list(&self) -> Vec<usize> {
        if self.horizons.is_empty() {
            vec![self.horizon]
        } else {
            self.horizons.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::InvalidInput(format!("unsupported config schema {}", self.schema)));
        }
        if self.d == 0 || self.horizon == 0 || self.horizons.contains(&0) {
            return Err(Error::InvalidInput("dimension and horizons must be at least 1".into()));
        }
        let rhos = self.rho.values();
        if rhos.is_empty() || rhos.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidInput("radii must be finite and nonnegative".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidInput("at least one seed is required".into()));
        }
        if self.jobs == 0 {
            return Err(Error::InvalidInput("jobs must be at least 1".into()));
        }
        self.kind()?;
        self.fw.validate()
    }

    /// SHA-256 of the serialized configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// The dynamics used throughout the experiments: 0.1 on the diagonal and the
/// superdiagonal.
pub fn experiment_dynamics(d: usize) -> Mat {
    Mat::from_fn(d, d, |i, j| if i == j || i + 1 == j { 0.1 } else { 0.0 })
}

/// Instance with `B = C = Q = R = I` and nominal covariances `UΛUᵀ`, `U` Haar
/// and `Λ` uniform on `[1, 2]`, drawn in the order `x0, w_0.., v_0..`.
pub fn generate_instance(d: usize, horizon: usize, seed: u64) -> Result<(SystemInstance, CovarianceProfile)> {
    if d == 0 || horizon == 0 {
        return Err(Error::InvalidInput("dimension and horizon must be at least 1".into()));
    }
    let eye = Mat::identity(d, d);
    let sys = SystemInstance::time_invariant(&experiment_dynamics(d), &eye, &eye, &eye, &eye, horizon)?;
    let mut rng = InstanceRng::seed_from_u64(seed);
    let nominal = random_profile(&mut rng, &sys, 1.0, 2.0);
    Ok((sys, nominal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub rho: f64,
    pub seed: u64,
    pub worst_case_gap: f64,
    pub nominal_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    pub iterations: usize,
    pub final_gap: f64,
    pub final_objective: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    pub wall_seconds: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryRow {
    pub rho: f64,
    pub seed: u64,
    pub nominal_cost: f64,
    pub robust_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub min_dominance: f64,
}

/// One grid point of an experiment, as recorded in the metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub rho: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub wall_seconds: f64,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub config_sha256: String,
    pub version: String,
    pub rng: String,
    pub wall_seconds: f64,
    pub runs: Vec<RunRecord>,
}

/// What an experiment produced; the binary exits with 0 iff `all_converged`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: Experiment,
    pub all_converged: bool,
    pub failures: Vec<RunRecord>,
    pub files: Vec<PathBuf>,
}

/// Outcome of the gap computation at one `(ρ, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GapPoint {
    pub row: GapRow,
    pub converged: bool,
    pub robust_worst_case: f64,
    pub nominal_worst_case: f64,
}

/// Worst-case and nominal gaps between the nominal LQG policy `û` and the
/// robust policy `u⋆` (the LQG policy at the Frank-Wolfe solution).
///
/// Worst-case costs of both fixed policies come from one oracle pass each;
/// nominal costs are evaluated exactly at the nominal covariances.
pub fn gap_point(
    sys: &SystemInstance,
    nominal: &CovarianceProfile,
    kind: &DivergenceKind,
    rho: f64,
    seed: u64,
    fw: &FwConfig,
) -> Result<GapPoint> {
    let model = NominalModel::uniform(kind.clone(), nominal, rho)?;
    let (sigma_star, trace) = solve(sys, &model, None, fw)?;
    let ss = build_stacked(sys)?;
    let nominal_policy = kalman_policy_to_purified(sys, nominal)?;
    let robust_policy = kalman_policy_to_purified(sys, &sigma_star)?;
    let (nominal_worst_case, _) = fixed_policy_worst_case(&ss, &nominal_policy, &model, fw.oracle_delta)?;
    let (robust_worst_case, _) = fixed_policy_worst_case(&ss, &robust_policy, &model, fw.oracle_delta)?;
    let moments = StackedMoments::from_profile(nominal);
    let robust_nominal = affine_objective(&ss, &robust_policy, &moments)?;
    let nominal_nominal = lqg_value(sys, nominal)?.cost;
    Ok(GapPoint {
        row: GapRow {
            rho,
            seed,
            worst_case_gap: nominal_worst_case - robust_worst_case,
            nominal_gap: robust_nominal - nominal_nominal,
        },
        converged: trace.converged,
        robust_worst_case,
        nominal_worst_case,
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::Io(e.to_string()))
}

fn record(seed: u64, rho: f64, horizon: usize, start: Instant, outcome: &Result<bool>) -> RunRecord {
    RunRecord {
        seed,
        rho,
        horizon,
        wall_seconds: start.elapsed().as_secs_f64(),
        converged: matches!(outcome, Ok(true)),
        error: outcome.as_ref().err().map(|e| e.to_string()),
    }
}

fn finish(cfg: &ExperimentConfig, start: Instant, runs: Vec<RunRecord>, mut files: Vec<PathBuf>) -> Result<RunSummary> {
    let meta = RunMetadata {
        experiment: cfg.experiment,
        seeds: cfg.seeds.clone(),
        config_sha256: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        rng: RNG_ID.into(),
        wall_seconds: start.elapsed().as_secs_f64(),
        runs,
    };
    let meta_path = cfg.output_dir.join("metadata.json");
    write_atomic(&meta_path, &serde_json::to_vec_pretty(&meta)?)?;
    let config_path = cfg.output_dir.join("config.json");
    write_atomic(&config_path, &serde_json::to_vec_pretty(cfg)?)?;
    files.push(meta_path);
    files.push(config_path);
    let failures: Vec<RunRecord> = meta.runs.into_iter().filter(|r| !r.converged).collect();
    Ok(RunSummary { experiment: cfg.experiment, all_converged: failures.is_empty(), failures, files })
}

pub fn run_gaps(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let kind = cfg.kind()?;
    let points: Vec<(f64, u64)> =
        cfg.rho.values().into_iter().flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s))).collect();
    let results: Vec<(RunRecord, Option<GapRow>)> = pool(cfg.jobs)?.install(|| {
        points
            .par_iter()
            .map(|&(rho, seed)| {
                let t0 = Instant::now();
                let res = generate_instance(cfg.d, cfg.horizon, seed)
                    .and_then(|(sys, nominal)| gap_point(&sys, &nominal, &kind, rho, seed, &cfg.fw));
                let outcome = res.as_ref().map(|p| p.converged).map_err(Clone::clone);
                (record(seed, rho, cfg.horizon, t0, &outcome), res.ok().map(|p| p.row))
            })
            .collect()
    });
    let rows: Vec<GapRow> = results.iter().filter_map(|(_, r)| r.clone()).collect();
    let path = cfg.output_dir.join("gaps.csv");
    write_csv(&path, &rows)?;
    finish(cfg, start, results.into_iter().map(|(r, _)| r).collect(), vec![path])
}

fn solve_point(cfg: &ExperimentConfig, kind: &DivergenceKind, horizon: usize, rho: f64, seed: u64) -> Result<crate::frank_wolfe::FwTrace> {
    let (sys, nominal) = generate_instance(cfg.d, horizon, seed)?;
    let model = NominalModel::uniform(kind.clone(), &nominal, rho)?;
    let fw = FwConfig { seed, ..cfg.fw };
    Ok(solve(&sys, &model, None, &fw)?.1)
}

pub fn run_convergence(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let kind = cfg.kind()?;
    let rho = cfg.rho.values()[0];
    let points: Vec<(usize, u64)> =
        cfg.horizon_list().into_iter().flat_map(|t| cfg.seeds.iter().map(move |&s| (t, s))).collect();
    let results: Vec<(RunRecord, Option<ConvergenceRow>, Option<PathBuf>)> = pool(cfg.jobs)?.install(|| {
        points
            .par_iter()
            .map(|&(horizon, seed)| {
                let t0 = Instant::now();
                let res = solve_point(cfg, &kind, horizon, rho, seed).and_then(|trace| {
                    let path = cfg.output_dir.join(format!("trace_T{horizon}_seed{seed}.csv"));
                    trace.write_csv(&path)?;
                    Ok((trace, path))
                });
                let outcome = res.as_ref().map(|(t, _)| t.converged).map_err(Clone::clone);
                let rec = record(seed, rho, horizon, t0, &outcome);
                match res {
                    Ok((trace, path)) => {
                        let row = ConvergenceRow {
                            horizon,
                            seed,
                            iterations: trace.iterations(),
                            final_gap: trace.final_gap(),
                            final_objective: trace.final_objective(),
                            converged: trace.converged,
                        };
                        (rec, Some(row), Some(path))
                    }
                    Err(_) => (rec, None, None),
                }
            })
            .collect()
    });
    let rows: Vec<ConvergenceRow> = results.iter().filter_map(|(_, r, _)| r.clone()).collect();
    let mut files: Vec<PathBuf> = results.iter().filter_map(|(_, _, p)| p.clone()).collect();
    let path = cfg.output_dir.join("convergence_summary.csv");
    write_csv(&path, &rows)?;
    files.push(path);
    finish(cfg, start, results.into_iter().map(|(r, _, _)| r).collect(), files)
}

/// Wall-clock time per solve. Grid points run one after another so that the
/// timings do not compete for cores; `jobs` is ignored.
pub fn run_runtime(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let kind = cfg.kind()?;
    let rho = cfg.rho.values()[0];
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for horizon in cfg.horizon_list() {
        for &seed in &cfg.seeds {
            let t0 = Instant::now();
            let res = solve_point(cfg, &kind, horizon, rho, seed);
            let wall_seconds = t0.elapsed().as_secs_f64();
            let outcome = res.as_ref().map(|t| t.converged).map_err(Clone::clone);
            runs.push(record(seed, rho, horizon, t0, &outcome));
            if let Ok(trace) = res {
                rows.push(RuntimeRow { horizon, seed, wall_seconds, iterations: trace.iterations() });
            }
        }
    }
    let path = cfg.output_dir.join("runtime.csv");
    write_csv(&path, &rows)?;
    finish(cfg, start, runs, vec![path])
}

/// Time-invariant data of the experiment family with nominal `Σ̂_w`, `Σ̂_v`
/// taken from the first process and measurement noise of the seeded draw.
pub fn generate_stationary_instance(d: usize, seed: u64) -> Result<(StationarySystem, Mat, Mat)> {
    let (sys, nominal) = generate_instance(d, 1, seed)?;
    let ss = StationarySystem::new(sys.a[0].clone(), sys.b[0].clone(), sys.c[0].clone(), sys.q[0].clone(), sys.r[0].clone())?;
    Ok((ss, nominal.w[0].clone(), nominal.v[0].clone()))
}

fn stationary_point(cfg: &ExperimentConfig, kind: &DivergenceKind, rho: f64, seed: u64) -> Result<StationaryRow> {
    let (ss, w, v) = generate_stationary_instance(cfg.d, seed)?;
    let ball_w = AmbiguityBall::centered(kind.clone(), &w, rho)?;
    let ball_v = AmbiguityBall::centered(kind.clone(), &v, rho)?;
    let res = solve_stationary_fw(&ss, &ball_w, &ball_v, &cfg.fw)?;
    let nominal_cost = stationary_cost(&ss, &w, &v)?.avg_cost;
    let robust_cost = stationary_cost(&ss, &res.sigma_w, &res.sigma_v)?.avg_cost;
    let min_dominance = min_eigenvalue(&(&res.sigma_w - &w)).min(min_eigenvalue(&(&res.sigma_v - &v)));
    Ok(StationaryRow {
        rho,
        seed,
        nominal_cost,
        robust_cost,
        iterations: res.records.len(),
        converged: res.converged,
        min_dominance,
    })
}

pub fn run_stationary(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let kind = cfg.kind()?;
    let points: Vec<(f64, u64)> =
        cfg.rho.values().into_iter().flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s))).collect();
    let results: Vec<(RunRecord, Option<StationaryRow>)> = pool(cfg.jobs)?.install(|| {
        points
            .par_iter()
            .map(|&(rho, seed)| {
                let t0 = Instant::now();
                let res = stationary_point(cfg, &kind, rho, seed);
                let outcome = res.as_ref().map(|r| r.converged).map_err(Clone::clone);
                (record(seed, rho, 0, t0, &outcome), res.ok())
            })
            .collect()
    });
    let rows: Vec<StationaryRow> = results.iter().filter_map(|(_, r)| r.clone()).collect();
    let path = cfg.output_dir.join("stationary.csv");
    write_csv(&path, &rows)?;
    finish(cfg, start, results.into_iter().map(|(r, _)| r).collect(), vec![path])
}

/// Everything a single solve reports besides its trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub seed: u64,
    pub rho: f64,
    pub divergence: String,
    pub objective: f64,
    pub fw_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub nominal_cost: f64,
    pub min_dominance_margin: f64,
    /// Worst-case covariance blocks in the order `x0, w_0.., v_0..`.
    pub covariances: Vec<Vec<Vec<f64>>>,
    /// Feedback gains `K_t` of the robust policy.
    pub gains: Vec<Vec<Vec<f64>>>,
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn run_single(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let kind = cfg.kind()?;
    let (rho, seed) = (cfg.rho.values()[0], cfg.seeds[0]);
    let t0 = Instant::now();
    let res = (|| -> Result<(SolveReport, crate::frank_wolfe::FwTrace)> {
        let (sys, nominal) = generate_instance(cfg.d, cfg.horizon, seed)?;
        let model = NominalModel::uniform(kind.clone(), &nominal, rho)?;
        let (profile, trace) = solve(&sys, &model, None, &FwConfig { seed, ..cfg.fw })?;
        let robust = lqg_value(&sys, &profile)?;
        let report = SolveReport {
            seed,
            rho,
            divergence: kind.label(),
            objective: robust.cost,
            fw_gap: trace.final_gap(),
            iterations: trace.iterations(),
            converged: trace.converged,
            nominal_cost: lqg_value(&sys, &nominal)?.cost,
            min_dominance_margin: min_dominance_margin(&model, &profile),
            covariances: profile.blocks().map(rows_of).collect(),
            gains: robust.k.iter().map(rows_of).collect(),
        };
        Ok((report, trace))
    })();
    let outcome = res.as_ref().map(|(r, _)| r.converged).map_err(Clone::clone);
    let runs = vec![record(seed, rho, cfg.horizon, t0, &outcome)];
    let mut files = Vec::new();
    if let Ok((report, trace)) = &res {
        let trace_path = cfg.output_dir.join("trace.csv");
        trace.write_csv(&trace_path)?;
        let report_path = cfg.output_dir.join("solution.json");
        write_atomic(&report_path, &serde_json::to_vec_pretty(report)?)?;
        files.extend([trace_path, report_path]);
    }
    finish(cfg, start, runs, files)
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    match cfg.experiment {
        Experiment::Convergence => run_convergence(cfg),
        Experiment::Runtime => run_runtime(cfg),
        Experiment::Gaps => run_gaps(cfg),
        Experiment::InfiniteHorizon => run_stationary(cfg),
        Experiment::SingleSolve => run_single(cfg),
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

/// Read a CSV written by this module back into rows.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matops::sym_eigen;

    #[test]
    fn dynamics_pattern() {
        assert_eq!(experiment_dynamics(2), Mat::from_row_slice(2, 2, &[0.1, 0.1, 0.0, 0.1]));
    }

    #[test]
    fn nominal_spectra_and_determinism() {
        let (sys, nominal) = generate_instance(3, 4, 11).unwrap();
        assert_eq!(sys.b[0], Mat::identity(3, 3));
        for blk in nominal.blocks() {
            let (vals, _) = sym_eigen(blk);
            assert!(vals.iter().all(|&l| (1.0 - 1e-12..=2.0 + 1e-12).contains(&l)));
        }
        assert_eq!(generate_instance(3, 4, 11).unwrap(), (sys, nominal));
    }

    #[test]
    fn config_round_trip_and_schema_check() {
        let cfg = ExperimentConfig::preset(Experiment::Gaps);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"T\":2"));
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(cfg.hash(), ExperimentConfig::from_json(&text).unwrap().hash());
        let bad = text.replace("\"schema\":1", "\"schema\":2");
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let minimal = r#"{"schema":1,"experiment":"single_solve","d":2,"T":3,"divergence":"kl","rho":0.5,"seeds":[4],"output_dir":"x"}"#;
        let cfg = ExperimentConfig::from_json(minimal).unwrap();
        assert_eq!((cfg.fw, cfg.jobs), (FwConfig::default(), 1));
        assert!(ExperimentConfig::from_json(&minimal.replace("0.5", "-1")).is_err());
    }

    #[test]
    fn zero_radius_gaps_vanish() {
        let (sys, nominal) = generate_instance(2, 2, 0).unwrap();
        let fw = ExperimentConfig::preset(Experiment::Gaps).fw;
        let p = gap_point(&sys, &nominal, &DivergenceKind::Wasserstein2, 0.0, 0, &fw).unwrap();
        assert!(p.row.worst_case_gap.abs() < 1e-8 && p.row.nominal_gap.abs() < 1e-8, "{:?}", p.row);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_solve_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            d: 2,
            horizon: 2,
            seeds: vec![3],
            rho: RhoSpec::One(0.2),
            output_dir: dir.path().to_path_buf(),
            ..ExperimentConfig::preset(Experiment::SingleSolve)
        };
        let summary = run(&cfg).unwrap();
        assert!(summary.all_converged);
        let rows: Vec<crate::frank_wolfe::FwRecord> = read_csv(&dir.path().join("trace.csv")).unwrap();
        assert!(!rows.is_empty());
        let meta: RunMetadata =
            serde_json::from_slice(&std::fs::read(dir.path().join("metadata.json")).unwrap()).unwrap();
        assert_eq!(meta.config_sha256, cfg.hash());
        assert_eq!(meta.runs.len(), 1);
    }
}
