mod common;

use bivlmm::covariance::{
    build_marginal_cov, build_serial_cov, ar1_correlation, log_cholesky, KroneckerAr1, ResidualStructure,
};
use bivlmm::data::{read_long_csv, stack_wide, unstack, write_long_csv, DesignSpec, LongColumns, Marker, OccasionGrid, WideRow};
use bivlmm::estimation::{CovarianceParams, Method, ModelSpec, RandomEffects};
use bivlmm::inference::{chi2_sf, cov_to_corr, format_sig, sas_translate, SasOutputBundle};
use common::*;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
    (0..DESIGNS, 0..3usize, 0..4usize).prop_map(|(d, re, res)| {
        let re = match re {
            0 => RandomEffects::None,
            1 => RandomEffects::Slopes { independent: false },
            _ => RandomEffects::Slopes { independent: true },
        };
        ModelSpec::new(design_choice(d), re, RESIDUALS[res], Method::Reml)
    })
}

fn occasions_strategy() -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::btree_set(0u32..8, 1..6).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn log_cholesky_gives_positive_definite_matrices(
        theta in proptest::collection::vec(-2.0f64..2.0, 10)
    ) {
        let l = log_cholesky::factor_from_theta(&theta, 4).unwrap();
        let g = &l * l.transpose();
        prop_assert!((&g - g.transpose()).abs().max() == 0.0);
        prop_assert!(min_eigenvalue(&g) > 0.0);
        let back = log_cholesky::theta_from_matrix(&g).unwrap();
        for (a, b) in theta.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn marginal_covariance_is_symmetric_positive_definite(
        spec in spec_strategy(),
        o1 in occasions_strategy(),
        o2 in occasions_strategy(),
        seed in 0u64..1_000_000,
    ) {
        let mut rng = bivlmm::simulate::CounterRng::new(seed);
        let theta = random_theta(&mut rng, &spec, 1.5);
        let y = vec![0.0; o1.len() + o2.len()];
        let d = subject_design("s", &spec.design, [&o1, &o2], &y);
        let params = CovarianceParams::from_theta(&spec, &theta).unwrap();
        let v = build_marginal_cov(&d, params.g.as_ref(), &params.residual).unwrap();
        let scale = v.abs().max();
        prop_assert!((&v - v.transpose()).abs().max() <= 1e-10 * scale);
        if params.residual.error().is_some() {
            prop_assert!(min_eigenvalue(&v) > 0.0);
        }
        // entrywise agreement with the written-out definition
        let bf = brute_force_v(&d, &params);
        prop_assert!((&v - bf).abs().max() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn theta_round_trips_through_natural_parameters(spec in spec_strategy(), seed in 0u64..1_000_000) {
        let mut rng = bivlmm::simulate::CounterRng::new(seed);
        let theta = random_theta(&mut rng, &spec, 2.0);
        let back = CovarianceParams::from_theta(&spec, &theta).unwrap().theta();
        for (a, b) in theta.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn serial_cov_is_kronecker_on_complete_occasions(
        c in proptest::collection::vec(-1.5f64..1.5, 3),
        rho in -0.99f64..0.99,
        n in 1usize..8,
    ) {
        let k = KroneckerAr1::from_theta(&[c[0], c[1], c[2], rho.atanh()]).unwrap();
        let occ: Vec<u32> = (0..n as u32).collect();
        let r = build_serial_cov(&k, &occ, &occ).unwrap();
        let lit = kronecker(k.c(), &ar1_correlation(n, k.rho()));
        prop_assert!((&r - &lit).abs().max() <= 1e-12 * lit.abs().max().max(1.0));
    }

    #[test]
    fn serial_cov_matches_entry_rule_on_gapped_occasions(
        c in proptest::collection::vec(-1.5f64..1.5, 3),
        rho in -0.99f64..0.99,
        o1 in occasions_strategy(),
        o2 in occasions_strategy(),
    ) {
        let k = KroneckerAr1::from_theta(&[c[0], c[1], c[2], rho.atanh()]).unwrap();
        let r = build_serial_cov(&k, &o1, &o2).unwrap();
        let rows: Vec<(Marker, u32)> = o1.iter().map(|&o| (Marker::M1, o)).chain(o2.iter().map(|&o| (Marker::M2, o))).collect();
        let res = ResidualStructure::KroneckerAr1Only(k.clone());
        for (i, &(a, j)) in rows.iter().enumerate() {
            for (l, &(b, m)) in rows.iter().enumerate() {
                let e = serial_entry(&res, a, j, b, m);
                prop_assert!((r[(i, l)] - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn cross_marker_correlation_is_proportional(
        c in proptest::collection::vec(-1.5f64..1.5, 3),
        rho in -0.99f64..0.99,
        lag in 0u32..6,
    ) {
        let k = KroneckerAr1::from_theta(&[c[0], c[1], c[2], rho.atanh()]).unwrap();
        let cm = k.c();
        let corr = k.cov(Marker::M1, 0, Marker::M2, lag) / (k.cov(Marker::M1, 0, Marker::M1, 0) * k.cov(Marker::M2, lag, Marker::M2, lag)).sqrt();
        let expected = cm[(0, 1)] / (cm[(0, 0)] * cm[(1, 1)]).sqrt() * k.rho().powi(lag as i32);
        prop_assert!((corr - expected).abs() < 1e-12);
        // same lag-1 intra-marker correlation for both markers
        let r1 = k.cov(Marker::M1, 0, Marker::M1, 1) / cm[(0, 0)];
        let r2 = k.cov(Marker::M2, 0, Marker::M2, 1) / cm[(1, 1)];
        prop_assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn correlation_matrix_is_idempotent(theta in proptest::collection::vec(-1.5f64..1.5, 6)) {
        let l = log_cholesky::factor_from_theta(&theta, 3).unwrap();
        let c = cov_to_corr(&(&l * l.transpose())).unwrap();
        let cc = cov_to_corr(&c).unwrap();
        prop_assert!((&c - &cc).abs().max() < 1e-15);
        for i in 0..3 {
            prop_assert_eq!(c[(i, i)], 1.0);
        }
    }

    #[test]
    fn chi_square_tail_matches_reference(df in 1u32..=10, x in 0.0f64..400.0) {
        let reference = 1.0 - ChiSquared::new(df as f64).unwrap().cdf(x);
        let ours = chi2_sf(x, df as f64);
        // the reference loses relative precision in the far tail; compare absolutely there
        if reference > 1e-8 {
            prop_assert!((ours - reference).abs() <= 1e-8 * reference, "df {df} x {x}: {ours} vs {reference}");
        } else {
            prop_assert!((ours - reference).abs() <= 1e-16, "df {df} x {x}: {ours} vs {reference}");
        }
    }

    #[test]
    fn sas_translation_round_trips(
        e1 in 0.01f64..500.0,
        e2 in 0.01f64..500.0,
        rho in -0.99f64..0.99,
        un in proptest::collection::vec(-10.0f64..10.0, 3),
    ) {
        let b = SasOutputBundle::from_natural([e1, e2], rho, [un[0], un[1], un[2]]).unwrap();
        let t = sas_translate(&b).unwrap();
        prop_assert!((t.sigma2_eps[0] - e1).abs() <= 1e-12 * e1);
        prop_assert!((t.sigma2_eps[1] - e2).abs() <= 1e-12 * e2);
        prop_assert!((t.rho - rho).abs() <= 1e-12);
        prop_assert_eq!(t.process_cov, [[un[0], un[1]], [un[1], un[2]]]);
    }

    #[test]
    fn format_sig_keeps_six_digits(x in -1e9f64..1e9) {
        let s = format_sig(x, 6);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - x).abs() <= 5e-6 * x.abs() + 1e-300, "{x} -> {s}");
    }

    #[test]
    fn wide_long_round_trip(
        values in proptest::collection::vec((proptest::option::of(-100.0f64..100.0), proptest::option::of(-100.0f64..100.0)), 1..12),
    ) {
        let grid = OccasionGrid::new(4.0, 0.0).unwrap();
        let rows: Vec<WideRow> = values
            .iter()
            .enumerate()
            .filter(|(_, (a, b))| a.is_some() || b.is_some())
            .map(|(i, (a, b))| WideRow { subject: format!("s{}", i % 3), time: 4.0 * (i / 3) as f64, values: [*a, *b] })
            .collect();
        let data = stack_wide(&rows, grid).unwrap();
        let mut back = unstack(&data);
        let mut sorted = rows.clone();
        let key = |r: &WideRow| (r.subject.clone(), r.time.to_bits());
        sorted.sort_by_key(key);
        back.sort_by_key(key);
        prop_assert_eq!(back, sorted);
        let mut buf = Vec::new();
        write_long_csv(&mut buf, &data).unwrap();
        let reread = read_long_csv(buf.as_slice(), &LongColumns::default(), grid).unwrap();
        prop_assert_eq!(reread, data);
    }
}

#[test]
fn table_sized_design_has_expected_blocks() {
    let d = subject_design("s", &DesignSpec::piecewise(4.0), [&[1, 2], &[1, 2]], &[0.0; 4]);
    assert_eq!(d.x.nrows(), 4);
    assert_eq!(d.x.ncols(), 4);
    assert_eq!(d.x.view((0, 2), (2, 2)).abs().max(), 0.0);
    assert_eq!(d.x.view((2, 0), (2, 2)).abs().max(), 0.0);
}
