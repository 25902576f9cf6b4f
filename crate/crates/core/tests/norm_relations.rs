use hyperboloidal_core::grid::GridDomain;
use hyperboloidal_core::spaces::{b_norm, g_norm, holder_norm, sobolev_norm, NormSpec, SampledField};
use proptest::prelude::*;

fn sampled(h: f64, g: impl Fn(f64) -> f64) -> SampledField {
    let grid = GridDomain::new(1.0, h, None).unwrap();
    SampledField::from_fn(&grid, |x, _| g(x)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn annulus_sup_never_exceeds_full_integral(gamma in 0.1f64..1.5, alpha in -1.0f64..0.0, shift in 1u32..8) {
        let h = 1.0 / 1024.0;
        let f = sampled(h, |x| x.powf(gamma) * (1.0 + x).ln().cos());
        let x2 = f64::powi(2.0, -(shift as i32)) / 2.0;
        let g = g_norm(&f, &NormSpec::dyadic_sup(alpha, 1, x2, 1.0).unwrap()).unwrap();
        let hn = sobolev_norm(&f, &NormSpec::sobolev(alpha, 1, x2, 1.0).unwrap()).unwrap();
        prop_assert!(g <= hn * (1.0 + 1e-12));
    }

    #[test]
    fn dyadic_sum_dominates_holder_for_nonnegative_weights(gamma in 0.0f64..2.0, alpha in 0.0f64..1.0) {
        let gamma = gamma.max(alpha);
        let f = sampled(1.0 / 2048.0, |x| x.powf(gamma) * (2.0 - x));
        let x2 = 1.0 / 256.0;
        let b = b_norm(&f, &NormSpec::dyadic_sum(alpha, 0, x2, 1.0).unwrap()).unwrap();
        let c = holder_norm(&f, &NormSpec::holder(alpha, 0, x2, 1.0).unwrap()).unwrap();
        prop_assert!(b >= c * (1.0 - 1e-12), "{b} < {c}");
    }

    #[test]
    fn holder_norm_is_monotone_in_cutoff(alpha in -1.0f64..0.5, gamma in -0.5f64..1.0) {
        let f = sampled(1.0 / 512.0, |x| x.powf(gamma) + x);
        let wide = holder_norm(&f, &NormSpec::holder(alpha, 1, 4.0 / 512.0, 1.0).unwrap()).unwrap();
        let narrow = holder_norm(&f, &NormSpec::holder(alpha, 1, 16.0 / 512.0, 1.0).unwrap()).unwrap();
        prop_assert!(wide >= narrow);
    }
}

#[test]
fn sobolev_norm_of_power_matches_integral() {
    let h = 1.0 / 4096.0;
    let (gamma, alpha, x2) = (0.5, -0.5, 1.0 / 64.0);
    let f = sampled(h, |x| x.powf(gamma));
    let got = sobolev_norm(&f, &NormSpec::sobolev(alpha, 0, x2, 1.0).unwrap()).unwrap();
    let expected = ((1.0 - x2.powf(2.0 * (gamma - alpha))) / (2.0 * (gamma - alpha))).sqrt();
    assert!((got - expected).abs() <= 1e-5 * expected, "{got} vs {expected}");
}
