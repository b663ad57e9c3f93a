use drlq::divergence::{membership, AmbiguityBall, DivergenceKind, MomentPair};
use drlq::frank_wolfe::{solve, FwConfig, NominalModel, StepRule};
use drlq::lqg::{lqg_value, CovarianceProfile, SystemInstance};
use drlq::random::{gaussian_matrix, random_profile, random_system, InstanceRng};
use drlq::stacked::{
    affine_objective, build_stacked, fixed_policy_worst_case, inner_minimum, is_block_lower_triangular,
    kalman_policy_to_purified, optimal_intercept, policy_convert, AffinePolicy, Conversion, StackedMoments,
};
use drlq::Mat;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn small_instance(rng: &mut InstanceRng) -> (SystemInstance, CovarianceProfile) {
    let (n, t) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let (m, p) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let sys = random_system(rng, n, m, p, t);
    let cov = random_profile(rng, &sys, 0.5, 2.0);
    (sys, cov)
}

fn kinds() -> [DivergenceKind; 3] {
    [DivergenceKind::Wasserstein2, DivergenceKind::KullbackLeibler, DivergenceKind::Fisher]
}

/// A member of `ball` with a nonzero mean.
fn member(rng: &mut InstanceRng, ball: &AmbiguityBall) -> MomentPair {
    let d = ball.dim();
    let nominal = ball.nominal.covariance();
    let mean = DVector::from_iterator(d, (0..d).map(|_| rng.random_range(-1.0..1.0)));
    let tilt = gaussian_matrix(rng, d, d) * 0.5;
    let mut s = 1.0;
    loop {
        let f = Mat::identity(d, d) + &tilt * s;
        let cand = MomentPair::from_mean_cov(&mean * s, &(&f * &nominal * f.transpose())).unwrap();
        if membership(ball, &cand, 0.0).unwrap() {
            return cand;
        }
        s *= 0.7;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// At the Frank-Wolfe output the causal minimum over policies equals the
    /// dynamic-programming value, and the resulting policy cannot be hurt by
    /// moving the noise anywhere else in the balls.
    #[test]
    fn saddle_point_at_the_solver_output(seed in any::<u64>(), rho in 0.05f64..1.0) {
        let mut rng = InstanceRng::seed_from_u64(seed);
        let (sys, nominal) = small_instance(&mut rng);
        let ss = build_stacked(&sys).unwrap();
        for kind in kinds() {
            let model = NominalModel::uniform(kind.clone(), &nominal, rho).unwrap();
            let cfg = FwConfig { gap_tol: 1e-10, step_rule: StepRule::LineSearchBacktracking, ..FwConfig::default() };
            let (star, _) = solve(&sys, &model, None, &cfg).unwrap();
            let value = lqg_value(&sys, &star).unwrap().cost;
            let (_, inner) = inner_minimum(&ss, &StackedMoments::from_profile(&star)).unwrap();
            prop_assert!((inner - value).abs() <= 1e-5 * value, "{:?}: {} vs {}", kind, inner, value);
            let policy = kalman_policy_to_purified(&sys, &star).unwrap();
            let (worst, _) = fixed_policy_worst_case(&ss, &policy, &model, 0.999).unwrap();
            prop_assert!(worst >= value - 1e-9 * value);
            prop_assert!(worst <= value * (1.0 + 1e-6), "{:?}: worst {} vs value {}", kind, worst, value);
        }
    }

    #[test]
    fn centering_the_noise_never_helps_the_controller(seed in any::<u64>(), rho in 0.05f64..1.0) {
        let mut rng = InstanceRng::seed_from_u64(seed);
        let (sys, nominal) = small_instance(&mut rng);
        let ss = build_stacked(&sys).unwrap();
        let t = sys.horizon();
        for kind in kinds() {
            let pairs: Vec<MomentPair> = nominal
                .blocks()
                .map(|b| member(&mut rng, &AmbiguityBall::centered(kind.clone(), b, rho).unwrap()))
                .collect();
            let centered: Vec<MomentPair> = pairs.iter().map(|p| MomentPair::zero_mean(&p.second_moment).unwrap()).collect();
            let stack = |ps: &[MomentPair]| StackedMoments::from_pairs(&ps[0], &ps[1..=t], &ps[t + 1..]);
            let (with_mean, zero_mean) = (stack(&pairs), stack(&centered));
            let (policy, at_zero) = inner_minimum(&ss, &zero_mean).unwrap();
            let q = optimal_intercept(&ss, &policy.u, &with_mean).unwrap();
            let at_mean = affine_objective(&ss, &AffinePolicy::new(&ss, policy.u.clone(), q).unwrap(), &with_mean).unwrap();
            prop_assert!(at_zero >= at_mean - 1e-9 * (1.0 + at_zero.abs()));
        }
    }

    #[test]
    fn policy_maps_keep_zero_blocks_exactly_zero(seed in any::<u64>()) {
        let mut rng = InstanceRng::seed_from_u64(seed);
        let (sys, cov) = small_instance(&mut rng);
        let ss = build_stacked(&sys).unwrap();
        let (m, p, t) = (ss.m, ss.p, ss.horizon);
        let mut u = gaussian_matrix(&mut rng, m * t, p * t);
        for i in 0..m * t {
            for j in p * (i / m + 1)..p * t {
                u[(i, j)] = 0.0;
            }
        }
        let q = DVector::from_iterator(m * t, (0..m * t).map(|_| rng.random_range(-1.0..1.0)));
        let pol = AffinePolicy::new(&ss, u, q).unwrap();
        let out = policy_convert(&ss, Conversion::PurifiedToOutput, &pol).unwrap();
        let back = policy_convert(&ss, Conversion::OutputToPurified, &out).unwrap();
        for candidate in [&out.u, &back.u] {
            prop_assert!(is_block_lower_triangular(candidate, m, p));
        }
        prop_assert!((&back.u - &pol.u).amax() <= 1e-10 * (1.0 + pol.u.amax()));
        prop_assert!((&back.q - &pol.q).amax() <= 1e-10 * (1.0 + pol.q.amax()));
        let (best, _) = inner_minimum(&ss, &StackedMoments::from_profile(&cov)).unwrap();
        prop_assert!(is_block_lower_triangular(&best.u, m, p));
        prop_assert!(is_block_lower_triangular(&kalman_policy_to_purified(&sys, &cov).unwrap().u, m, p));
    }
}

#[test]
fn non_causal_policies_are_rejected() {
    let mut rng = InstanceRng::seed_from_u64(1);
    let sys = random_system(&mut rng, 2, 1, 1, 3);
    let ss = build_stacked(&sys).unwrap();
    let mut u = Mat::zeros(3, 3);
    u[(0, 1)] = 1e-300;
    assert!(AffinePolicy::new(&ss, u, DVector::zeros(3)).is_err());
}
