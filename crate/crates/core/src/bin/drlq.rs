use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drlq::experiments::{run, Experiment, ExperimentConfig, RhoSpec};
use drlq::frank_wolfe::StepRule;

#[derive(Parser)]
#[command(name = "drlq", version, about = "Distributionally robust LQG experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one random instance and write its trace and solution.
    Solve(SolveArgs),
    /// Worst-case and nominal cost gaps across radii.
    Gaps(Common),
    /// Frank-Wolfe traces per horizon and seed.
    Convergence(Common),
    /// Wall-clock time per solve across horizons.
    Runtime(Common),
    /// Stationary (infinite-horizon) worst-case covariances.
    Stationary(Common),
}

/// Flags shared by every subcommand; each overrides the JSON config.
#[derive(Args)]
struct Common {
    /// JSON config (schema 1); missing fields fall back to the experiment preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    rho: Option<Vec<f64>>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    divergence: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    gap_tol: Option<f64>,
    /// `vanishing` or `line_search_backtracking`.
    #[arg(long)]
    step_rule: Option<String>,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    rho: f64,
    #[arg(long)]
    horizon: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    divergence: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    gap_tol: Option<f64>,
    #[arg(long)]
    step_rule: Option<String>,
}

fn load(experiment: Experiment, config: &Option<PathBuf>) -> Result<ExperimentConfig, String> {
    let Some(path) = config else {
        return Ok(ExperimentConfig::preset(experiment));
    };
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| e.to_string())?;
    cfg.experiment = experiment;
    Ok(cfg)
}

fn step_rule(s: &str) -> Result<StepRule, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown step rule '{s}'"))
}

fn apply_fw(cfg: &mut ExperimentConfig, max_iters: Option<usize>, gap_tol: Option<f64>, rule: &Option<String>) -> Result<(), String> {
    if let Some(k) = max_iters {
        cfg.fw.max_iters = k;
    }
    if let Some(g) = gap_tol {
        cfg.fw.gap_tol = g;
    }
    if let Some(r) = rule {
        cfg.fw.step_rule = step_rule(r)?;
    }
    Ok(())
}

fn build(command: Command) -> Result<ExperimentConfig, String> {
    let (experiment, args) = match command {
        Command::Solve(a) => {
            let mut cfg = load(Experiment::SingleSolve, &a.config)?;
            cfg.seeds = vec![a.seed];
            cfg.rho = RhoSpec::One(a.rho);
            cfg.horizon = a.horizon;
            cfg.d = a.dim;
            cfg.divergence = a.divergence;
            cfg.output_dir = a.out;
            apply_fw(&mut cfg, a.max_iters, a.gap_tol, &a.step_rule)?;
            return Ok(cfg);
        }
        Command::Gaps(a) => (Experiment::Gaps, a),
        Command::Convergence(a) => (Experiment::Convergence, a),
        Command::Runtime(a) => (Experiment::Runtime, a),
        Command::Stationary(a) => (Experiment::InfiniteHorizon, a),
    };
    let mut cfg = load(experiment, &args.config)?;
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if let Some(seeds) = args.seed {
        cfg.seeds = seeds;
    }
    if let Some(rho) = args.rho {
        cfg.rho = RhoSpec::Many(rho);
    }
    if let Some(t) = args.horizon {
        cfg.horizon = t;
    }
    if let Some(ts) = args.horizons {
        cfg.horizons = ts;
    }
    if let Some(d) = args.dim {
        cfg.d = d;
    }
    if let Some(div) = args.divergence {
        cfg.divergence = div;
    }
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    apply_fw(&mut cfg, args.max_iters, args.gap_tol, &args.step_rule)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let summary = build(cli.command).and_then(|cfg| run(&cfg).map_err(|e| e.to_string()));
    match summary {
        Ok(s) => {
            let text = serde_json::to_string(&s).expect("summary serializes");
            if s.all_converged {
                println!("{text}");
                ExitCode::SUCCESS
            } else {
                eprintln!("{text}");
                ExitCode::from(1)
            }
        }
        Err(message) => {
            eprintln!("{}", serde_json::json!({ "status": "error", "message": message }));
            ExitCode::from(2)
        }
    }
}
