use dp_noise_ledger::accountant::{
    build_curve, default_orders, rdp_subsampled_gaussian_int, rdp_subsampled_gaussian_quadrature,
    to_eps_delta, Conversion, PrivacyParams, RdpQuadrature,
};
use proptest::prelude::*;

#[test]
fn binomial_sum_matches_quadrature_on_grid() {
    let opts = RdpQuadrature::default();
    let mut worst = 0.0f64;
    for q in [0.01, 0.1, 0.17, 0.5] {
        for sigma in [1.0, 2.0, 6.0, 12.0] {
            for alpha in [2u32, 4, 8, 32, 64] {
                let exact = rdp_subsampled_gaussian_int(alpha, q, sigma).unwrap();
                let quad = rdp_subsampled_gaussian_quadrature(f64::from(alpha), q, sigma, &opts).unwrap();
                let rel = ((exact - quad) / exact).abs();
                worst = worst.max(rel);
                assert!(rel <= 1e-6, "alpha={alpha} q={q} sigma={sigma}: {exact} vs {quad}");
            }
        }
    }
    eprintln!("worst relative disagreement {worst:e}");
}

#[test]
fn q_one_reduces_to_gaussian() {
    for alpha in 2..=64u32 {
        for sigma in [0.5, 1.0, 3.0, 10.0, 20.0] {
            let v = rdp_subsampled_gaussian_int(alpha, 1.0, sigma).unwrap();
            let want = f64::from(alpha) / (2.0 * sigma * sigma);
            assert!((v - want).abs() <= 1e-12, "alpha={alpha} sigma={sigma}");
        }
    }
}

#[test]
fn small_rate_amplification_is_quadratic() {
    for q in [1e-3, 5e-3, 0.01] {
        for alpha in [2u32, 4, 8] {
            for sigma in [2.0, 6.0] {
                let r = rdp_subsampled_gaussian_int(alpha, 2.0 * q, sigma).unwrap()
                    / rdp_subsampled_gaussian_int(alpha, q, sigma).unwrap();
                assert!((3.5..=4.5).contains(&r), "q={q} alpha={alpha} sigma={sigma}: ratio {r}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rdp_nondecreasing_in_order(q in 0.001f64..1.0, sigma in 0.3f64..20.0, alpha in 2u32..256) {
        let a = rdp_subsampled_gaussian_int(alpha, q, sigma).unwrap();
        let b = rdp_subsampled_gaussian_int(alpha + 1, q, sigma).unwrap();
        prop_assert!(b >= a * (1.0 - 1e-12), "{a} > {b}");
    }

    #[test]
    fn rdp_strictly_decreasing_in_sigma(q in 0.01f64..1.0, sigma in 0.3f64..20.0, alpha in 2u32..64) {
        let a = rdp_subsampled_gaussian_int(alpha, q, sigma).unwrap();
        let b = rdp_subsampled_gaussian_int(alpha, q, sigma * 1.05).unwrap();
        prop_assert!(b < a, "{a} <= {b}");
    }

    #[test]
    fn finite_for_supported_range(q in 0.0f64..=1.0, sigma in 0.3f64..100.0, alpha in 2u32..=256) {
        let v = rdp_subsampled_gaussian_int(alpha, q, sigma).unwrap();
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn composition_is_linear(q in 0.01f64..1.0, sigma in 0.5f64..10.0, k in 1u64..1000) {
        let orders = [2.0, 5.0, 17.0, 64.0];
        let one = build_curve(&PrivacyParams::new(q, sigma, 1e-5, 1).unwrap(), &orders).unwrap();
        let many = build_curve(&PrivacyParams::new(q, sigma, 1e-5, k).unwrap(), &orders).unwrap();
        for (a, b) in one.values().iter().zip(many.values()) {
            prop_assert!((a * k as f64 - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn improved_never_looser_than_classic(q in 0.01f64..1.0, sigma in 0.5f64..10.0, steps in 0u64..5000) {
        let c = build_curve(&PrivacyParams::new(q, sigma, 1e-5, steps).unwrap(), &default_orders()).unwrap();
        let classic = to_eps_delta(&c, 1e-5, Conversion::Classic).unwrap();
        let improved = to_eps_delta(&c, 1e-5, Conversion::Improved).unwrap();
        prop_assert!(improved.eps <= classic.eps);
        prop_assert!(c.orders().contains(&improved.best_order));
    }
}
