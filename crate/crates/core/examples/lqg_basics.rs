//! Finite-horizon LQG on a small random plant: Riccati gains, Kalman
//! covariances, the optimal cost, and a Monte-Carlo check of that cost.

use drlq::lqg::{lqg_value, simulate_closed_loop};
use drlq::random::{random_profile, random_system, InstanceRng};
use rand::SeedableRng;

fn main() -> drlq::Result<()> {
    let mut rng = InstanceRng::seed_from_u64(7);
    let sys = random_system(&mut rng, 3, 2, 2, 5);
    let cov = random_profile(&mut rng, &sys, 0.5, 2.0);

    let sol = lqg_value(&sys, &cov)?;
    println!("optimal expected cost: {:.6}", sol.cost);
    for (t, (k, s)) in sol.k.iter().zip(&sol.sigma_filt).enumerate() {
        println!("t={t}  |K_t| = {:.4}  tr(Σ_t) = {:.4}", k.norm(), s.trace());
    }

    let (mean, se) = simulate_closed_loop(&sys, &cov, &sol, 200_000, 1)?;
    println!("simulated cost: {mean:.6} ± {se:.6} (z = {:.2})", (mean - sol.cost) / se);
    Ok(())
}
