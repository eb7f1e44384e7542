//! Values frozen from an independent 50-digit evaluation.
#![allow(clippy::excessive_precision)]

use approx::assert_relative_eq;
use distransfer_core::certification::{binomial_lower_bound, cohen_radius, normal_quantile};

/// `(k, n, alpha, lower bound)`.
const CLOPPER_PEARSON: [(usize, usize, f64, f64); 6] = [
    (1000, 1000, 0.01, 0.99540541735152696245),
    (990, 1000, 0.01, 0.97995739409912106885),
    (500, 1000, 0.001, 0.45077105398478236697),
    (87, 100, 0.05, 0.80128020695751760167),
    (3, 10, 0.01, 0.047506998951161249849),
    (1, 1, 0.5, 0.5),
];

#[test]
fn clopper_pearson_lower_bounds() {
    for (k, n, alpha, want) in CLOPPER_PEARSON {
        let got = binomial_lower_bound(k, n, alpha).unwrap();
        assert_relative_eq!(got, want, max_relative = 1e-9);
    }
    assert_eq!(binomial_lower_bound(0, 50, 0.01).unwrap(), 0.0);
}

#[test]
fn radius_at_half_sigma_and_two_sided_one_percent() {
    assert_relative_eq!(cohen_radius(0.5, 0.99, 0.01), 1.1631739370204205504, max_relative = 1e-12);
}

#[test]
fn quantile_reference_points() {
    assert_eq!(normal_quantile(0.5), 0.0);
    assert_relative_eq!(normal_quantile(0.975), 1.9599639845400542355, max_relative = 1e-14);
    assert_relative_eq!(normal_quantile(1e-10), -6.3613409024040562047, max_relative = 1e-12);
}
