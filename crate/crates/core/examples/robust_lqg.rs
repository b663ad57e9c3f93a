//! Worst-case noise covariances by Frank-Wolfe, then a comparison of the
//! nominal LQG controller and the robust one under their own worst cases.

use drlq::divergence::DivergenceKind;
use drlq::experiments::generate_instance;
use drlq::frank_wolfe::{min_dominance_margin, solve, FwConfig, NominalModel};
use drlq::lqg::lqg_value;
use drlq::stacked::{build_stacked, fixed_policy_worst_case, inner_minimum, kalman_policy_to_purified, StackedMoments};

fn main() -> drlq::Result<()> {
    let (sys, nominal) = generate_instance(3, 4, 0)?;
    let model = NominalModel::uniform(DivergenceKind::KullbackLeibler, &nominal, 0.2)?;
    let cfg = FwConfig { gap_tol: 1e-6, ..FwConfig::default() };
    let (star, trace) = solve(&sys, &model, None, &cfg)?;
    println!(
        "Frank-Wolfe: {} iterations, gap {:.2e}, converged {}",
        trace.iterations(),
        trace.final_gap(),
        trace.converged
    );
    for r in trace.records.iter().take(5) {
        println!("  iter {:>3}  objective {:.6}  gap {:.3e}", r.iter, r.objective, r.fw_gap);
    }
    println!("dominance margin over the nominal: {:.2e}", min_dominance_margin(&model, &star));

    let nominal_cost = lqg_value(&sys, &nominal)?.cost;
    let robust_cost = trace.final_objective();
    println!("nominal cost {nominal_cost:.6}, worst-case cost {robust_cost:.6}");

    let ss = build_stacked(&sys)?;
    let (_, inner) = inner_minimum(&ss, &StackedMoments::from_profile(&star))?;
    println!("min over causal policies at Σ⋆: {inner:.6}");

    let naive = kalman_policy_to_purified(&sys, &nominal)?;
    let robust = kalman_policy_to_purified(&sys, &star)?;
    let (naive_wc, _) = fixed_policy_worst_case(&ss, &naive, &model, 0.999)?;
    let (robust_wc, _) = fixed_policy_worst_case(&ss, &robust, &model, 0.999)?;
    println!("worst case of the nominal controller: {naive_wc:.6}");
    println!("worst case of the robust controller:  {robust_wc:.6}");
    Ok(())
}
