use drlq::grad::lqg_gradient;
use drlq::lqg::{lqg_value, CovarianceProfile, SystemInstance};
use drlq::matops::{inner, symmetrize};
use drlq::random::{gaussian_matrix, random_profile, random_system, InstanceRng};
use drlq::Mat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn instance(rng: &mut InstanceRng) -> (SystemInstance, CovarianceProfile) {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=3);
    let p = rng.random_range(1..=3);
    let t = rng.random_range(1..=6);
    let sys = random_system(rng, n, m, p, t);
    let cov = random_profile(rng, &sys, 0.5, 2.0);
    (sys, cov)
}

fn shifted(cov: &CovarianceProfile, dir: &[Mat], eps: f64) -> CovarianceProfile {
    CovarianceProfile::from_blocks(cov.blocks().zip(dir).map(|(b, d)| b + d * eps).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The remainder of the first-order expansion shrinks like ε².
    #[test]
    fn first_order_expansion(seed in any::<u64>()) {
        let mut rng = InstanceRng::seed_from_u64(seed);
        let (sys, cov) = instance(&mut rng);
        let (f0, grad) = lqg_gradient(&sys, &cov).unwrap();
        let dir: Vec<Mat> = cov.blocks().map(|b| {
            let d = symmetrize(&gaussian_matrix(&mut rng, b.nrows(), b.nrows()));
            let norm = d.norm().max(1e-12);
            d / norm
        }).collect();
        let slope: f64 = grad.blocks().zip(&dir).map(|(g, d)| inner(g, d)).sum();
        let remainder = |eps: f64| (lqg_value(&sys, &shifted(&cov, &dir, eps)).unwrap().cost - f0 - eps * slope).abs();
        let (r1, r2) = (remainder(1e-3), remainder(5e-4));
        // Below this the remainder is rounding noise and the ratio says nothing.
        if r1 > 1e-9 * (1.0 + f0.abs()) {
            let ratio = r1 / r2;
            prop_assert!((3.0..=5.0).contains(&ratio), "ratio {}", ratio);
        }
        prop_assert!(r1 <= 1e-4 * (1.0 + f0.abs()));
    }

    #[test]
    fn gradient_blocks_are_psd(seed in any::<u64>()) {
        let mut rng = InstanceRng::seed_from_u64(seed);
        let (sys, cov) = instance(&mut rng);
        let (_, grad) = lqg_gradient(&sys, &cov).unwrap();
        prop_assert!(grad.min_eigenvalue() >= -1e-8);
        for b in grad.blocks() {
            prop_assert_eq!(b, &b.transpose());
        }
    }

    #[test]
    fn blind_system_ignores_measurement_noise(seed in any::<u64>()) {
        let mut rng = InstanceRng::seed_from_u64(seed);
        let (mut sys, cov) = instance(&mut rng);
        for c in sys.c.iter_mut() {
            c.fill(0.0);
        }
        let (_, grad) = lqg_gradient(&sys, &cov).unwrap();
        for dv in &grad.dv {
            prop_assert!(dv.amax() <= 1e-12, "{}", dv.amax());
        }
    }
}
