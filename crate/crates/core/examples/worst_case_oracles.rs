//! The linear maximization step over each ambiguity ball: given a gradient Γ,
//! find the covariance in the ball maximizing ⟨Γ, Σ⟩.

use drlq::divergence::{divergence, AmbiguityBall, DivergenceKind, MomentPair};
use drlq::matops::min_eigenvalue;
use drlq::oracle::linear_oracle;
use drlq::random::{gaussian_matrix, random_spd, InstanceRng};
use rand::SeedableRng;

fn main() -> drlq::Result<()> {
    let mut rng = InstanceRng::seed_from_u64(3);
    let nominal = random_spd(&mut rng, 3, 0.5, 2.0);
    let g = gaussian_matrix(&mut rng, 3, 3);
    let gamma = &g * g.transpose();
    let rho = 0.5;

    for kind in [DivergenceKind::Wasserstein2, DivergenceKind::KullbackLeibler, DivergenceKind::Fisher] {
        let ball = AmbiguityBall::centered(kind.clone(), &nominal, rho)?;
        let res = linear_oracle(&ball, &gamma, &nominal, 0.0, 0.999)?;
        let dist = divergence(&kind, &MomentPair::zero_mean(&res.sigma_star)?, &ball.nominal)?;
        println!(
            "{:<12} gain {:.5}  multiplier {:.4}  divergence {:?}  min eig(Σ⋆ − Σ̂) {:+.2e}",
            kind.label(),
            res.objective,
            res.dual_gamma,
            dist.finite(),
            min_eigenvalue(&(&res.sigma_star - &nominal)),
        );
    }
    Ok(())
}
