//! Self-checks of the quadrature and sampling oracles used by the other
//! integration tests, then property checks of the moment maps against them.

mod common;

use fdrnn::moments::{sigmoid, TransferKind};
use proptest::prelude::*;

#[test]
fn hermite_rule_integrates_gaussian_moments() {
    let rule = common::gauss_hermite(128);
    let total: f64 = rule.1.iter().sum();
    assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-13);
    for (m, v) in [(0.0, 1.0), (1.5, 0.3), (-2.0, 9.0)] {
        let e2 = common::gaussian_expectation(&rule, m, v, |a| a * a);
        let e4 = common::gaussian_expectation(&rule, m, v, |a| a.powi(4));
        assert!((e2 - (m * m + v)).abs() < 1e-11);
        assert!((e4 - (m.powi(4) + 6.0 * m * m * v + 3.0 * v * v)).abs() < 1e-9);
    }
}

#[test]
fn legendre_rule_is_exact_for_polynomials() {
    let rule = common::gauss_legendre(16);
    let x30 = common::integrate(&rule, -1.0, 1.0, 1, |x| x.powi(30));
    assert!((x30 - 2.0 / 31.0).abs() < 1e-14);
    let cubic = common::integrate(&rule, 0.0, 3.0, 7, |x| x * x * x - x);
    assert!((cubic - (81.0 / 4.0 - 4.5)).abs() < 1e-12);
}

#[test]
fn hermite_and_legendre_agree_on_tanh() {
    let gh = common::gauss_hermite(128);
    let gl = common::gauss_legendre(16);
    for (m, v) in [(0.3, 0.5), (-4.0, 16.0), (6.0, 2.0), (0.0, 16.0)] {
        let s = f64::sqrt(v);
        let a = common::gaussian_expectation(&gh, m, v, f64::tanh);
        let b = common::integrate(&gl, m - 14.0 * s, m + 14.0 * s, 400, |x| {
            x.tanh() * common::normal_pdf((x - m) / s) / s
        });
        // tanh's complex poles limit Hermite accuracy at wide variances
        assert!((a - b).abs() < 1e-4, "({m}, {v}): {a} vs {b}");
    }
}

#[test]
fn rectifier_quadrature_matches_half_normal() {
    let gl = common::gauss_legendre(16);
    let (m, v) = common::rectifier_quadrature(&gl, 0.0, 1.0);
    let pi = std::f64::consts::PI;
    assert!((m - 1.0 / (2.0 * pi).sqrt()).abs() < 1e-13);
    assert!((v - (0.5 - 1.0 / (2.0 * pi))).abs() < 1e-13);
}

#[test]
fn streaming_moments_standard_errors() {
    let mut s = common::Moments::with_shift(10.0);
    for v in [9.0, 11.0, 9.0, 11.0] {
        s.push(v);
    }
    assert!((s.mean() - 10.0).abs() < 1e-15);
    assert!((s.var() - 4.0 / 3.0).abs() < 1e-14);
    assert!((s.mean_se() - 0.5).abs() < 1e-15);
    // two-point distribution: fourth central moment equals c2^2
    assert!(s.var_se() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn smooth_transfers_within_tolerance(m in -6.0f64..6.0, v in 0.0f64..16.0) {
        let gh = common::gauss_hermite(128);
        for (kind, f) in [(TransferKind::Tanh, f64::tanh as fn(f64) -> f64), (TransferKind::Sigmoid, sigmoid)] {
            let e1 = common::gaussian_expectation(&gh, m, v, f);
            let e2 = common::gaussian_expectation(&gh, m, v, |a| f(a) * f(a));
            let got = kind.moments(m, v);
            prop_assert!((got.mean - e1).abs() < 2e-2);
            prop_assert!((got.var - (e2 - e1 * e1)).abs() < 2e-2);
            prop_assert!(got.var >= 0.0);
        }
    }

    #[test]
    fn rectifier_closed_form(m in -6.0f64..6.0, v in 1e-6f64..16.0) {
        let gl = common::gauss_legendre(16);
        let (qm, qv) = common::rectifier_quadrature(&gl, m, v);
        let got = TransferKind::Rectifier.moments(m, v);
        prop_assert!((got.mean - qm).abs() < 1e-8);
        prop_assert!((got.var - qv).abs() < 1e-8);
    }
}
