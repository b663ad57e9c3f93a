use drlq::divergence::{divergence, gelbrich, membership, AmbiguityBall, DivergenceKind, MomentPair};
use drlq::matops::{inner, min_eigenvalue, symmetrize};
use drlq::oracle::{brute_force_oracle, linear_oracle, KlDual, WassersteinDual};
use drlq::random::{gaussian_matrix, random_orthogonal, random_spd, InstanceRng};
use drlq::Mat;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn zm(m: &Mat) -> MomentPair {
    MomentPair::zero_mean(m).unwrap()
}

fn psd_gradient(rng: &mut InstanceRng, d: usize) -> Mat {
    let rank = rng.random_range(1..=d);
    let g = gaussian_matrix(rng, d, rank);
    &g * g.transpose()
}

fn commuting(rng: &mut InstanceRng, d: usize) -> (Mat, Mat) {
    let basis = random_orthogonal(rng, d);
    let conj = |v: Vec<f64>| symmetrize(&(&basis * Mat::from_diagonal(&DVector::from_vec(v)) * basis.transpose()));
    let g = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
    let s = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
    (conj(g), conj(s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_sits_on_the_boundary(seed in any::<u64>(), d in 1usize..=5, rho in 0.05f64..2.0) {
        let mut rng = InstanceRng::seed_from_u64(seed);
        let gamma = psd_gradient(&mut rng, d);
        let nominal = random_spd(&mut rng, d, 0.3, 2.0);
        for kind in [DivergenceKind::Wasserstein2, DivergenceKind::KullbackLeibler, DivergenceKind::Fisher] {
            let ball = AmbiguityBall::centered(kind.clone(), &nominal, rho).unwrap();
            let res = linear_oracle(&ball, &gamma, &nominal, 0.0, 0.99).unwrap();
            let dist = divergence(&kind, &zm(&res.sigma_star), &ball.nominal).unwrap().finite().unwrap();
            prop_assert!(res.active);
            prop_assert!((dist - rho).abs() <= 1e-6, "{:?}: {} vs {}", kind, dist, rho);
        }
    }

    #[test]
    fn kl_and_fisher_outputs_dominate(seed in any::<u64>(), d in 1usize..=5, rho in 0.05f64..2.0) {
        let mut rng = InstanceRng::seed_from_u64(seed);
        let gamma = psd_gradient(&mut rng, d);
        let nominal = random_spd(&mut rng, d, 0.3, 2.0);
        for kind in [DivergenceKind::KullbackLeibler, DivergenceKind::Fisher] {
            let ball = AmbiguityBall::centered(kind, &nominal, rho).unwrap();
            let res = linear_oracle(&ball, &gamma, &nominal, 0.0, 0.99).unwrap();
            prop_assert!(min_eigenvalue(&(&res.sigma_star - &nominal)) >= -1e-7);
        }
    }

    #[test]
    fn wasserstein_output_dominates_when_commuting(seed in any::<u64>(), d in 1usize..=5, rho in 0.05f64..2.0) {
        let mut rng = InstanceRng::seed_from_u64(seed);
        let (gamma, nominal) = commuting(&mut rng, d);
        let ball = AmbiguityBall::centered(DivergenceKind::Wasserstein2, &nominal, rho).unwrap();
        let res = linear_oracle(&ball, &gamma, &nominal, 0.0, 0.99).unwrap();
        prop_assert!(min_eigenvalue(&(&res.sigma_star - &nominal)) >= -1e-7);
    }

    #[test]
    fn dual_slopes_change_sign_once(seed in any::<u64>(), d in 1usize..=5, rho in 0.05f64..2.0) {
        let mut rng = InstanceRng::seed_from_u64(seed);
        let gamma = psd_gradient(&mut rng, d);
        let nominal = random_spd(&mut rng, d, 0.3, 2.0);
        let w = WassersteinDual::new(&gamma, &nominal, rho, &nominal);
        let k = KlDual::new(&gamma, &nominal, rho, &nominal).unwrap();
        let (wlo, whi) = w.bounds();
        let (klo, khi) = k.bounds();
        let grids: [(f64, f64, &dyn Fn(f64) -> f64); 2] =
            [(wlo, whi, &|g| w.slope(g)), (klo * (1.0 + 1e-9), khi, &|g| k.slope(g))];
        // The dual is convex, so its slope is nondecreasing and crosses zero
        // once inside the bracket (possibly at an end, e.g. for rank-one Γ).
        for (lo, hi, slope) in grids {
            let vals: Vec<f64> = (0..=300).map(|i| slope(lo + (hi - lo) * i as f64 / 300.0)).collect();
            let tol = 1e-9 * (1.0 + rho);
            prop_assert!(vals.windows(2).all(|p| p[1] >= p[0] - tol));
            prop_assert!(vals[0] <= tol && vals[300] >= -tol);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn delta_suboptimal_against_the_grid(seed in any::<u64>(), d in 1usize..=3, rho in 0.1f64..1.0, delta in 0.5f64..0.999) {
        let mut rng = InstanceRng::seed_from_u64(seed);
        let (gamma, nominal) = commuting(&mut rng, d);
        for kind in [DivergenceKind::Wasserstein2, DivergenceKind::KullbackLeibler, DivergenceKind::Fisher] {
            let ball = AmbiguityBall::centered(kind.clone(), &nominal, rho).unwrap();
            let res = linear_oracle(&ball, &gamma, &nominal, 0.0, delta).unwrap();
            let brute = brute_force_oracle(&gamma, &ball, &nominal, 1e-3).unwrap();
            prop_assert!(res.objective >= delta * brute.objective - 1e-12, "{:?}", kind);
            prop_assert!(res.subopt_delta_achieved >= delta);
        }
    }
}

/// With `Γ` and `Σ̂` not commuting, the maximizer over the Gelbrich ball is
/// `BΣ̂B` with `B = γ(γI − Γ)⁻¹ ⪰ I`, which need not dominate `Σ̂`. The
/// maximizer is unique (the dual multiplier exceeds `λ_max(Γ)`), so no
/// dominating point of the ball attains the optimum either.
#[test]
fn wasserstein_maximizer_can_fail_to_dominate() {
    let gamma = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let nominal = Mat::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
    let ball = AmbiguityBall::centered(DivergenceKind::Wasserstein2, &nominal, 1.0).unwrap();
    let res = linear_oracle(&ball, &gamma, &nominal, 0.0, 0.999).unwrap();
    assert!(res.dual_gamma > 1.0);
    assert!((gelbrich(&zm(&res.sigma_star), &ball.nominal).unwrap() - 1.0).abs() < 1e-9);
    let margin = min_eigenvalue(&(&res.sigma_star - &nominal));
    assert!(margin < -1e-2, "margin {margin}");

    // Optimality against random feasible points, dominating or not.
    let mut rng = InstanceRng::seed_from_u64(9);
    let best = inner(&gamma, &res.sigma_star);
    let mut best_dominating = f64::NEG_INFINITY;
    for _ in 0..20_000 {
        let f = Mat::identity(2, 2) + gaussian_matrix(&mut rng, 2, 2) * rng.random_range(0.0..1.5);
        let cand = symmetrize(&(&f * &nominal * f.transpose()));
        if membership(&ball, &zm(&cand), 0.0).unwrap() {
            let value = inner(&gamma, &cand);
            assert!(value <= best + 1e-9);
            if min_eigenvalue(&(&cand - &nominal)) >= 0.0 {
                best_dominating = best_dominating.max(value);
            }
        }
    }
    assert!(best_dominating < best);
}
