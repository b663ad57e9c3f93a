//! Adjoint gradient of the LQG value with respect to every noise covariance,
//! compared against central finite differences.

use drlq::grad::{fd_gradient, lqg_gradient, FD_STEP};
use drlq::random::{random_profile, random_system, InstanceRng};
use rand::SeedableRng;

fn main() -> drlq::Result<()> {
    let mut rng = InstanceRng::seed_from_u64(11);
    let sys = random_system(&mut rng, 4, 2, 3, 6);
    let cov = random_profile(&mut rng, &sys, 0.5, 2.0);

    let (value, grad) = lqg_gradient(&sys, &cov)?;
    let fd = fd_gradient(&sys, &cov, FD_STEP)?;
    println!("value {value:.6}");
    println!("blocks: {} (X0, W_0.., V_0..)", grad.num_blocks());
    println!("smallest gradient eigenvalue: {:.3e}", grad.min_eigenvalue());
    println!("max relative error vs finite differences: {:.3e}", grad.max_relative_error(&fd));
    Ok(())
}
