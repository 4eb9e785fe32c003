//! Hyperparameters of the magnitude-aware losses: the linear margin `m(a)`,
//! the hyperbolic regularizer `g(a)`, their derivatives, and the lower bound
//! on the regularizer weight `lambda_g` that makes the convexity and
//! monotonicity guarantees hold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss hyperparameters.
///
/// `s` is the logit scale, `[l_a, u_a]` the magnitude interval on which the
/// margin is defined, `[l_m, u_m]` the margin range in radians, and
/// `lambda_g` the regularizer weight. The margin is linear on `[l_a, u_a]`
/// and the regularizer is `g(a) = 1/a + a/u_a^2`, minimized at `u_a`.
///
/// Magnitudes outside `[l_a, u_a]` are clamped before the margin and the
/// regularizer are evaluated, with zero derivative in the clamped region, so
/// both functions are total and gradients never push through the clamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMagParams", deny_unknown_fields)]
pub struct MagParams {
    pub s: f64,
    pub l_a: f64,
    pub u_a: f64,
    pub l_m: f64,
    pub u_m: f64,
    pub lambda_g: f64,
}

/// Unvalidated mirror used to run the invariant checks on deserialization.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMagParams {
    s: f64,
    l_a: f64,
    u_a: f64,
    l_m: f64,
    u_m: f64,
    lambda_g: f64,
}

impl TryFrom<RawMagParams> for MagParams {
    type Error = Error;

    fn try_from(raw: RawMagParams) -> Result<Self> {
        MagParams::new(raw.s, raw.l_a, raw.u_a, raw.l_m, raw.u_m, raw.lambda_g)
    }
}

impl Default for MagParams {
    /// Reference configuration: `s = 64`, magnitude interval `[10, 110]`,
    /// margin range `[0.4, 0.8]`, `lambda_g = 35`.
    fn default() -> Self {
        MagParams::new(64.0, 10.0, 110.0, 0.4, 0.8, 35.0).expect("reference params are valid")
    }
}

impl MagParams {
    /// Validates the hard invariants and builds the parameter set.
    ///
    /// `u_m > pi/2` and `lambda_g` below [`MagParams::lambda_lower_bound`]
    /// are permitted (the ablation explores both); they only clear
    /// [`MagParams::guarantees_hold`].
    pub fn new(s: f64, l_a: f64, u_a: f64, l_m: f64, u_m: f64, lambda_g: f64) -> Result<Self> {
        for (name, v) in [
            ("s", s),
            ("l_a", l_a),
            ("u_a", u_a),
            ("l_m", l_m),
            ("u_m", u_m),
            ("lambda_g", lambda_g),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidParams(format!("{name} must be finite, got {v}")));
            }
        }
        if s <= 0.0 {
            return Err(Error::InvalidParams(format!("s must be positive, got {s}")));
        }
        if !(0.0 < l_a && l_a < u_a) {
            return Err(Error::InvalidParams(format!(
                "magnitude bounds must satisfy 0 < l_a < u_a, got l_a={l_a}, u_a={u_a}"
            )));
        }
        if !(0.0 <= l_m && l_m < u_m && u_m <= std::f64::consts::PI) {
            return Err(Error::InvalidParams(format!(
                "margin bounds must satisfy 0 <= l_m < u_m <= pi, got l_m={l_m}, u_m={u_m}"
            )));
        }
        if lambda_g < 0.0 {
            return Err(Error::InvalidParams(format!(
                "lambda_g must be nonnegative, got {lambda_g}"
            )));
        }
        Ok(MagParams { s, l_a, u_a, l_m, u_m, lambda_g })
    }

    /// Margin slope `K = (u_m - l_m)/(u_a - l_a)`. Strictly positive.
    pub fn slope(&self) -> f64 {
        (self.u_m - self.l_m) / (self.u_a - self.l_a)
    }

    /// Magnitude clamped to `[l_a, u_a]`.
    pub fn clamp_magnitude(&self, a: f64) -> f64 {
        a.clamp(self.l_a, self.u_a)
    }

    /// Magnitude-aware margin, in radians.
    ///
    /// Linear on `[l_a, u_a]` with `margin(l_a) = l_m` and
    /// `margin(u_a) = u_m`; the argument is clamped to the interval first,
    /// so the range is always `[l_m, u_m]`.
    pub fn margin(&self, a: f64) -> f64 {
        self.slope() * (self.clamp_magnitude(a) - self.l_a) + self.l_m
    }

    /// Derivative of [`MagParams::margin`]: the constant slope strictly
    /// inside `(l_a, u_a)` and zero at or outside the bounds (the clamp
    /// subgradient).
    pub fn margin_deriv(&self, a: f64) -> f64 {
        if a > self.l_a && a < self.u_a {
            self.slope()
        } else {
            0.0
        }
    }

    /// Regularizer `g(a) = 1/a + a/u_a^2`, strictly convex on `(0, inf)` and
    /// minimized at `u_a`.
    pub fn regularizer(&self, a: f64) -> Result<f64> {
        if a <= 0.0 {
            return Err(Error::Domain(format!("regularizer requires a > 0, got {a}")));
        }
        Ok(1.0 / a + a / (self.u_a * self.u_a))
    }

    /// Derivative `g'(a) = -1/a^2 + 1/u_a^2`; negative on `(0, u_a)`, zero
    /// at `u_a`.
    pub fn regularizer_deriv(&self, a: f64) -> Result<f64> {
        if a <= 0.0 {
            return Err(Error::Domain(format!("regularizer requires a > 0, got {a}")));
        }
        Ok(-1.0 / (a * a) + 1.0 / (self.u_a * self.u_a))
    }

    /// Smallest regularizer weight for which the convexity and unique-optimum
    /// guarantees hold: `s*K/(-g'(l_a))` in closed form,
    /// `s * u_a^2 * l_a^2 / (u_a^2 - l_a^2) * K`.
    pub fn lambda_lower_bound(&self) -> f64 {
        let ua2 = self.u_a * self.u_a;
        let la2 = self.l_a * self.l_a;
        self.s * ua2 * la2 / (ua2 - la2) * self.slope()
    }

    /// True iff both guarantee conditions are met: `lambda_g` at or above
    /// [`MagParams::lambda_lower_bound`] and `u_m <= pi/2`.
    pub fn guarantees_hold(&self) -> bool {
        self.lambda_g >= self.lambda_lower_bound() && self.u_m <= std::f64::consts::FRAC_PI_2
    }

    /// Mean margin over a supplied magnitude sample. Which magnitude
    /// distribution "mean margin" refers to is a caller decision; this
    /// evaluates it empirically, clamping like [`MagParams::margin`].
    pub fn mean_margin(&self, magnitudes: &[f64]) -> Result<f64> {
        if magnitudes.is_empty() {
            return Err(Error::Domain("mean margin needs at least one magnitude".into()));
        }
        Ok(magnitudes.iter().map(|&a| self.margin(a)).sum::<f64>() / magnitudes.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference() -> MagParams {
        MagParams::default()
    }

    #[test]
    fn margin_maps_endpoints_and_midpoint() {
        let p = reference();
        assert_eq!(p.margin(10.0), 0.4);
        assert_eq!(p.margin(110.0), 0.8);
        assert!((p.margin(60.0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn margin_clamps_outside_interval() {
        let p = reference();
        assert_eq!(p.margin(5.0), 0.4);
        assert_eq!(p.margin(200.0), 0.8);
    }

    #[test]
    fn margin_deriv_matches_finite_difference_inside() {
        let p = reference();
        let h = 1e-6;
        let fd = (p.margin(60.0 + h) - p.margin(60.0 - h)) / (2.0 * h);
        assert!((p.margin_deriv(60.0) - fd).abs() < 1e-9);
        assert!((p.margin_deriv(60.0) - 0.004).abs() < 1e-15);
    }

    #[test]
    fn margin_deriv_zero_in_clamped_region() {
        let p = reference();
        assert_eq!(p.margin_deriv(5.0), 0.0);
        assert_eq!(p.margin_deriv(200.0), 0.0);
        assert_eq!(p.margin_deriv(10.0), 0.0);
        assert_eq!(p.margin_deriv(110.0), 0.0);
    }

    #[test]
    fn regularizer_closed_form_values() {
        let p = reference();
        // Minimizer: g(u_a) = 2/u_a.
        assert!((p.regularizer(110.0).unwrap() - 2.0 / 110.0).abs() < 1e-15);
        // 1/10 + 10/12100
        assert!((p.regularizer(10.0).unwrap() - 0.10082644628099173).abs() < 1e-15);
        assert_eq!(p.regularizer_deriv(110.0).unwrap(), 0.0);
        assert!((p.regularizer_deriv(10.0).unwrap() - (-0.009917355371900827)).abs() < 1e-15);
    }

    #[test]
    fn regularizer_rejects_nonpositive_magnitude() {
        let p = reference();
        assert!(matches!(p.regularizer(0.0), Err(Error::Domain(_))));
        assert!(matches!(p.regularizer(-3.0), Err(Error::Domain(_))));
        assert!(matches!(p.regularizer_deriv(0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn regularizer_deriv_negative_below_minimizer() {
        let p = reference();
        for a in [0.5, 5.0, 30.0, 109.9] {
            assert!(p.regularizer_deriv(a).unwrap() < 0.0, "a = {a}");
        }
    }

    #[test]
    fn lambda_lower_bound_reference_value() {
        let p = reference();
        let bound = p.lambda_lower_bound();
        assert!((bound - 25.813333333333333).abs() < 1e-9);
        // The default weight clears the bound.
        assert!(p.lambda_g >= bound);
    }

    #[test]
    fn lambda_lower_bound_linear_in_scale() {
        let p = reference();
        let doubled = MagParams::new(2.0 * p.s, p.l_a, p.u_a, p.l_m, p.u_m, p.lambda_g).unwrap();
        let ratio = doubled.lambda_lower_bound() / p.lambda_lower_bound();
        assert!((ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn guarantees_flag_tracks_both_conditions() {
        // Ablation row with u_m = 1.60 > pi/2 stays constructible but loses the flag.
        let wide = MagParams::new(64.0, 10.0, 110.0, 0.25, 1.60, 35.0).unwrap();
        assert!(!wide.guarantees_hold());
        // lambda_g below the bound is a warning, not an error.
        let weak = MagParams::new(64.0, 10.0, 110.0, 0.4, 0.8, 0.0).unwrap();
        assert!(!weak.guarantees_hold());
        assert!(reference().guarantees_hold());
    }

    #[test]
    fn mean_margin_over_a_uniform_sample_hits_the_midpoint() {
        let p = reference();
        // Linear margin: a uniform grid over [l_a, u_a] averages to the
        // margin midpoint.
        let sample: Vec<f64> = (0..=1000).map(|i| 10.0 + 0.1 * i as f64).collect();
        let mean = p.mean_margin(&sample).unwrap();
        assert!((mean - 0.6).abs() < 1e-12);
        assert!(p.mean_margin(&[]).is_err());
    }

    #[test]
    fn construction_rejects_bad_bounds() {
        assert!(MagParams::new(64.0, 110.0, 10.0, 0.4, 0.8, 35.0).is_err());
        assert!(MagParams::new(64.0, 0.0, 110.0, 0.4, 0.8, 35.0).is_err());
        assert!(MagParams::new(64.0, 10.0, 110.0, 0.8, 0.4, 35.0).is_err());
        assert!(MagParams::new(64.0, 10.0, 110.0, 0.4, 4.0, 35.0).is_err());
        assert!(MagParams::new(-1.0, 10.0, 110.0, 0.4, 0.8, 35.0).is_err());
        assert!(MagParams::new(64.0, 10.0, 110.0, 0.4, 0.8, -0.1).is_err());
        assert!(MagParams::new(f64::NAN, 10.0, 110.0, 0.4, 0.8, 35.0).is_err());
    }

    #[test]
    fn json_round_trip_uses_flat_keys() {
        let p = reference();
        let json = serde_json::to_value(p).unwrap();
        let obj = json.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["l_a", "l_m", "lambda_g", "s", "u_a", "u_m"]);
        let back: MagParams = serde_json::from_value(json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn json_rejects_unknown_or_invalid_fields() {
        let extra = r#"{"s":64,"l_a":10,"u_a":110,"l_m":0.4,"u_m":0.8,"lambda_g":35,"zeta":1}"#;
        assert!(serde_json::from_str::<MagParams>(extra).is_err());
        let inverted = r#"{"s":64,"l_a":110,"u_a":10,"l_m":0.4,"u_m":0.8,"lambda_g":35}"#;
        assert!(serde_json::from_str::<MagParams>(inverted).is_err());
    }

    /// Strategy over valid parameter sets, including out-of-guarantee ones.
    fn valid_params() -> impl Strategy<Value = MagParams> {
        (
            0.5f64..200.0,
            0.1f64..50.0,
            0.1f64..100.0,
            0.0f64..1.0,
            1e-3f64..1.5,
            0.0f64..200.0,
        )
            .prop_map(|(s, l_a, width_a, l_m, width_m, lambda_g)| {
                let u_a = l_a + width_a;
                let u_m = (l_m + width_m).min(std::f64::consts::PI);
                MagParams::new(s, l_a, u_a, l_m, u_m, lambda_g).unwrap()
            })
    }

    proptest! {
        #[test]
        fn margin_is_nondecreasing(p in valid_params(), a1 in -10.0f64..300.0, a2 in -10.0f64..300.0) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            prop_assert!(p.margin(lo) <= p.margin(hi) + 1e-15);
        }

        #[test]
        fn regularizer_is_strictly_convex(
            p in valid_params(),
            a1 in 0.05f64..300.0,
            a2 in 0.05f64..300.0,
            t in 0.01f64..0.99,
        ) {
            prop_assume!((a1 - a2).abs() > 1e-6);
            let mid = t * a1 + (1.0 - t) * a2;
            let lhs = p.regularizer(mid).unwrap();
            let rhs = t * p.regularizer(a1).unwrap() + (1.0 - t) * p.regularizer(a2).unwrap();
            prop_assert!(lhs < rhs);
        }

        #[test]
        fn derivatives_match_central_differences(p in valid_params(), frac in 0.05f64..0.95) {
            // Probe strictly inside (l_a, u_a), away from the clamp points.
            let a = p.l_a + frac * (p.u_a - p.l_a);
            prop_assume!(a - p.l_a > 1e-3 && p.u_a - a > 1e-3);
            let h = 1e-6;
            let fd_m = (p.margin(a + h) - p.margin(a - h)) / (2.0 * h);
            prop_assert!((fd_m - p.margin_deriv(a)).abs() < 1e-6);
            let fd_g = (p.regularizer(a + h).unwrap() - p.regularizer(a - h).unwrap()) / (2.0 * h);
            prop_assert!((fd_g - p.regularizer_deriv(a).unwrap()).abs() < 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn lambda_bound_matches_generic_formula(p in valid_params()) {
            // Closed form vs s*K/(-g'(l_a)), 1e-9 relative.
            let generic = p.s * p.slope() / (-p.regularizer_deriv(p.l_a).unwrap());
            let closed = p.lambda_lower_bound();
            prop_assert!((closed - generic).abs() <= 1e-9 * generic.abs().max(1.0));
        }
    }
}
