//! Infinite-horizon LQG: control and filter Riccati equations, the average
//! cost, and the worst-case stationary noise covariances.

use drlq::divergence::{AmbiguityBall, DivergenceKind};
use drlq::experiments::generate_stationary_instance;
use drlq::frank_wolfe::{FwConfig, StepRule};
use drlq::inf_horizon::{dare_residual, filter_are_residual, solve_dare, solve_filter_are, solve_stationary_fw, stationary_cost};

fn main() -> drlq::Result<()> {
    let (ss, w, v) = generate_stationary_instance(4, 2)?;
    let dare = solve_dare(&ss)?;
    let filter = solve_filter_are(&ss, &w, &v)?;
    println!("control ARE residual {:.2e}", dare_residual(&ss, &dare.p)?);
    println!("filter ARE residual  {:.2e}", filter_are_residual(&ss, &w, &v, &filter.sigma)?);

    let nominal = stationary_cost(&ss, &w, &v)?;
    println!("nominal average cost {:.6}", nominal.avg_cost);

    let cfg = FwConfig { gap_tol: 1e-6, step_rule: StepRule::LineSearchBacktracking, ..FwConfig::default() };
    for rho in [0.1, 0.5, 1.0] {
        let bw = AmbiguityBall::centered(DivergenceKind::KullbackLeibler, &w, rho)?;
        let bv = AmbiguityBall::centered(DivergenceKind::KullbackLeibler, &v, rho)?;
        let out = solve_stationary_fw(&ss, &bw, &bv, &cfg)?;
        let robust = stationary_cost(&ss, &out.sigma_w, &out.sigma_v)?;
        println!(
            "rho {rho:.1}: worst-case average cost {:.6} after {} iterations (converged {})",
            robust.avg_cost,
            out.records.len(),
            out.converged
        );
    }
    Ok(())
}
