//! Closed-form analysis of the scaling parameter.
//!
//! Under an idealized geometry — class centers at least 90 degrees apart on
//! the hypersphere, unit classifier weights pointing at their centers, no
//! bias — the average probability of the correct class at radius `alpha`
//! with `C` classes is
//!
//! ```text
//! p = e^alpha / (e^alpha + C - 2)
//! ```
//!
//! Inverting for a target probability gives the smallest radius that can
//! reach it: `alpha_low = ln(p (C-2) / (1-p))`. The geometric derivation
//! assumes `C < 2D` for feature dimension `D`; above that the closed form
//! is still computed but a warning is attached.

use crate::error::{Error, Result};

/// A `(C, p)` query for the lower bound on alpha.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundQuery {
    pub num_classes: usize,
    pub target_prob: f64,
}

impl BoundQuery {
    pub fn new(num_classes: usize, target_prob: f64) -> Result<Self> {
        if num_classes < 3 {
            return Err(Error::InvalidConfig {
                detail: format!("bound query needs C >= 3, got {num_classes}"),
            });
        }
        if !(target_prob > 0.0 && target_prob < 1.0) {
            return Err(Error::InvalidConfig {
                detail: format!("target probability must lie in (0,1), got {target_prob}"),
            });
        }
        Ok(Self {
            num_classes,
            target_prob,
        })
    }
}

/// Lower bound plus an optional applicability warning.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundResult {
    pub alpha_low: f64,
    pub warning: Option<String>,
}

/// One sample of the probability-vs-alpha curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbCurvePoint {
    pub alpha: f64,
    pub prob: f64,
}

/// Average correct-class probability at radius `alpha` with `C` classes.
///
/// Evaluated as `1 / (1 + (C-2) e^{-alpha})` so large alpha cannot
/// overflow.
pub fn avg_prob(alpha: f64, num_classes: usize) -> Result<f64> {
    if num_classes < 3 {
        return Err(Error::InvalidConfig {
            detail: format!("avg_prob needs C >= 3, got {num_classes}"),
        });
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidConfig {
            detail: format!("avg_prob needs alpha >= 0, got {alpha}"),
        });
    }
    Ok(1.0 / (1.0 + (num_classes as f64 - 2.0) * (-alpha).exp()))
}

/// Smallest alpha reaching the queried average probability.
pub fn alpha_lower_bound(query: &BoundQuery) -> f64 {
    let c = query.num_classes as f64;
    let p = query.target_prob;
    (p * (c - 2.0) / (1.0 - p)).ln()
}

/// [`alpha_lower_bound`] with the `C < 2D` applicability check. Pass the
/// feature dimension when it is known; the bound is returned either way.
pub fn alpha_lower_bound_checked(query: &BoundQuery, feature_dim: Option<usize>) -> BoundResult {
    let alpha_low = alpha_lower_bound(query);
    let warning = feature_dim.and_then(|d| {
        (query.num_classes >= 2 * d).then(|| {
            format!(
                "C = {} >= 2D = {}: the 90-degree class-center geometry behind the bound \
                 no longer holds; treat the value as indicative only",
                query.num_classes,
                2 * d
            )
        })
    });
    BoundResult { alpha_low, warning }
}

/// Uniformly sampled probability curve over `[0, alpha_max]`.
pub fn prob_curve(num_classes: usize, alpha_max: f64, steps: usize) -> Result<Vec<ProbCurvePoint>> {
    if steps < 2 {
        return Err(Error::InvalidConfig {
            detail: format!("prob_curve needs steps >= 2, got {steps}"),
        });
    }
    if !(alpha_max > 0.0) {
        return Err(Error::InvalidConfig {
            detail: format!("prob_curve needs alpha_max > 0, got {alpha_max}"),
        });
    }
    let mut points = Vec::with_capacity(steps);
    for i in 0..steps {
        let alpha = alpha_max * i as f64 / (steps - 1) as f64;
        points.push(ProbCurvePoint {
            alpha,
            prob: avg_prob(alpha, num_classes)?,
        });
    }
    Ok(points)
}

/// Curve serialized as CSV: header `alpha,prob`, 9 significant digits.
pub fn curve_csv(points: &[ProbCurvePoint]) -> String {
    let mut out = String::from("alpha,prob\n");
    for p in points {
        out.push_str(&format!("{:.8e},{:.8e}\n", p.alpha, p.prob));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn avg_prob_alpha_zero_four_classes() {
        let p = avg_prob(0.0, 4).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn avg_prob_direct_arithmetic() {
        let p = avg_prob(5.0, 10).unwrap();
        let expect = 5f64.exp() / (5f64.exp() + 8.0);
        assert!((p - expect).abs() < 1e-15);
        assert!((p - 0.9489).abs() < 1e-3);
    }

    #[test]
    fn avg_prob_saturates_for_large_alpha() {
        for c in [3usize, 100, 1_000_000] {
            let p = avg_prob(50.0, c).unwrap();
            assert!(p > 1.0 - 1e-9, "C={c} p={p}");
        }
        assert!(avg_prob(1e6, 10).unwrap() <= 1.0);
    }

    #[test]
    fn avg_prob_rejects_small_c() {
        assert!(avg_prob(1.0, 2).is_err());
    }

    #[test]
    fn lower_bound_small_set_value() {
        let q = BoundQuery::new(13403, 0.9).unwrap();
        let a = alpha_lower_bound(&q);
        assert!((a - 11.700).abs() < 1e-3, "{a}");
    }

    #[test]
    fn lower_bound_degenerate_zero() {
        let q = BoundQuery::new(3, 0.5).unwrap();
        assert_eq!(alpha_lower_bound(&q), 0.0);
    }

    #[test]
    fn lower_bound_large_set_value() {
        let q = BoundQuery::new(58207, 0.9).unwrap();
        let a = alpha_lower_bound(&q);
        assert!((a - 13.169).abs() < 1e-3, "{a}");
    }

    #[test]
    fn query_invariants_enforced() {
        assert!(BoundQuery::new(2, 0.5).is_err());
        assert!(BoundQuery::new(10, 0.0).is_err());
        assert!(BoundQuery::new(10, 1.0).is_err());
    }

    #[test]
    fn dimension_warning_when_c_exceeds_2d() {
        let q = BoundQuery::new(10, 0.9).unwrap();
        assert!(alpha_lower_bound_checked(&q, Some(2)).warning.is_some());
        assert!(alpha_lower_bound_checked(&q, Some(512)).warning.is_none());
        assert!(alpha_lower_bound_checked(&q, None).warning.is_none());
    }

    #[test]
    fn curve_endpoint_and_range() {
        let pts = prob_curve(10, 20.0, 5).unwrap();
        assert_eq!(pts.len(), 5);
        assert!((pts[0].prob - 1.0 / 9.0).abs() < 1e-12); // 1/(C-1) at alpha 0
        assert!(pts.iter().all(|p| p.prob > 0.0 && p.prob <= 1.0));
        assert!(pts[4].prob > 0.999);
    }

    #[test]
    fn curve_ordered_by_class_count() {
        let small = prob_curve(10, 30.0, 50).unwrap();
        let large = prob_curve(100, 30.0, 50).unwrap();
        for (a, b) in small.iter().zip(&large) {
            assert!(a.prob >= b.prob);
        }
    }

    #[test]
    fn curve_csv_shape() {
        let pts = prob_curve(10, 20.0, 3).unwrap();
        let csv = curve_csv(&pts);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "alpha,prob");
    }

    proptest! {
        #[test]
        fn round_trip_bound_and_prob(c in 3usize..100_000, p in 0.01f64..0.99) {
            let q = BoundQuery::new(c, p).unwrap();
            let alpha = alpha_lower_bound(&q);
            if alpha >= 0.0 {
                let back = avg_prob(alpha, c).unwrap();
                prop_assert!((back - p).abs() < 1e-9, "C={} p={} back={}", c, p, back);
            }
        }

        #[test]
        fn bound_monotone_in_c_and_p(c in 3usize..10_000, p in 0.1f64..0.9) {
            let base = alpha_lower_bound(&BoundQuery::new(c, p).unwrap());
            let more_classes = alpha_lower_bound(&BoundQuery::new(c + 1, p).unwrap());
            let more_prob = alpha_lower_bound(&BoundQuery::new(c, p + 0.05).unwrap());
            prop_assert!(more_classes > base);
            prop_assert!(more_prob > base);
        }

        #[test]
        fn prob_strictly_monotone(alpha in 0.0f64..25.0, c in 3usize..1000) {
            // alpha capped where 1/(1 + (C-2)e^-alpha) still has headroom
            // below 1.0 in f64; past that the math is strictly monotone but
            // the representation saturates.
            let p0 = avg_prob(alpha, c).unwrap();
            let p1 = avg_prob(alpha + 0.1, c).unwrap();
            let pc = avg_prob(alpha, c + 1).unwrap();
            prop_assert!(p1 > p0);
            prop_assert!(pc < p0);
        }
    }
}
