//! Numerical certificates for the scalar loss in the magnitude variable.
//!
//! Fixing the target angle `theta_y` and the inter-class exponential mass
//! `B = sum_{j != y} exp(s cos_theta_j)` reduces each magnitude-aware loss
//! to a one-dimensional function of the magnitude on `[l_a, u_a]`:
//!
//! `L(a) = -log(e^{A(a)} / (e^{A(a)} + B)) + lambda_g g(a)`
//!
//! with `A(a) = s cos(theta_y + m(a))` for the angular form and
//! `A(a) = s (cos_theta_y - m(a))` for the cosine form. This module
//! evaluates that restriction exactly (no clamping: out-of-interval
//! magnitudes are a domain error), certifies strict convexity by grid second
//! differences, locates the unique optimum, checks the endpoint derivative
//! signs, verifies that the optimum moves monotonically with the angle and
//! with the inter-class mass, and evaluates the binomial tail bound for the
//! probability that `theta_y + m(a)` stays within `[0, pi/2]`.

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::params::MagParams;

/// Which magnitude-aware loss the scalar restriction belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    MagFace,
    MagCosFace,
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossVariant::MagFace => f.write_str("magface"),
            LossVariant::MagCosFace => f.write_str("magcosface"),
        }
    }
}

/// One-dimensional restriction of a magnitude-aware loss.
#[derive(Debug, Clone)]
pub struct ScalarLossConfig {
    pub theta_y: f64,
    /// The inter-class exponential mass `B`.
    pub inter_class_mass: f64,
    pub params: MagParams,
    pub variant: LossVariant,
}

impl ScalarLossConfig {
    pub fn new(
        theta_y: f64,
        inter_class_mass: f64,
        params: MagParams,
        variant: LossVariant,
    ) -> Result<Self> {
        if !(0.0..=std::f64::consts::PI).contains(&theta_y) {
            return Err(Error::Config(format!("theta_y must lie in [0, pi], got {theta_y}")));
        }
        if !(inter_class_mass > 0.0 && inter_class_mass.is_finite()) {
            return Err(Error::Config(format!(
                "inter-class mass must be positive and finite, got {inter_class_mass}"
            )));
        }
        Ok(ScalarLossConfig { theta_y, inter_class_mass, params, variant })
    }

    fn check_interval(&self, a: f64) -> Result<()> {
        if a < self.params.l_a || a > self.params.u_a {
            return Err(Error::Domain(format!(
                "magnitude {a} outside [{}, {}]; the scalar restriction is not clamped",
                self.params.l_a, self.params.u_a
            )));
        }
        Ok(())
    }

    /// Target exponent `A(a)`.
    fn target_exponent(&self, a: f64) -> f64 {
        let m = self.params.margin(a);
        match self.variant {
            LossVariant::MagFace => self.params.s * (self.theta_y + m).cos(),
            LossVariant::MagCosFace => self.params.s * (self.theta_y.cos() - m),
        }
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1 / (1 + e^{-x})`, the classification weight `B / (e^A + B)` when
/// called with `x = ln B - A`.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact scalar restriction `L(a)` at fixed angle and inter-class mass.
pub fn scalar_loss(a: f64, cfg: &ScalarLossConfig) -> Result<f64> {
    cfg.check_interval(a)?;
    let classification = softplus(cfg.inter_class_mass.ln() - cfg.target_exponent(a));
    Ok(classification + cfg.params.lambda_g * cfg.params.regularizer(a)?)
}

/// Analytic derivative of [`scalar_loss`]. Defined on the closed interval;
/// at the endpoints it is the one-sided limit used by the endpoint-sign
/// certificate.
pub fn scalar_loss_deriv(a: f64, cfg: &ScalarLossConfig) -> Result<f64> {
    cfg.check_interval(a)?;
    let p = &cfg.params;
    let weight = sigmoid(cfg.inter_class_mass.ln() - cfg.target_exponent(a));
    let slope = p.slope();
    let classification = match cfg.variant {
        LossVariant::MagFace => weight * p.s * slope * (cfg.theta_y + p.margin(a)).sin(),
        LossVariant::MagCosFace => weight * p.s * slope,
    };
    Ok(classification + p.lambda_g * p.regularizer_deriv(a)?)
}

/// Result of locating the unique optimum of the scalar loss.
#[derive(Debug, Clone, Serialize)]
pub struct OptimumReport {
    pub a_star: f64,
    pub loss_at_star: f64,
    pub deriv_at_la: f64,
    pub deriv_at_ua: f64,
    pub iterations: usize,
}

const GOLDEN_RATIO_COMPLEMENT: f64 = 0.618_033_988_749_894_9;
const GOLDEN_WIDTH: f64 = 1e-8;
/// Grid used to screen for the impossible -,+,- derivative sign pattern.
const SIGN_SCAN_POINTS: usize = 1024;
/// Allowed disagreement between the golden-section bracket midpoint and the
/// derivative bisection root. Near the optimum the loss is flat relative to
/// f64 resolution, which limits what value comparisons can resolve.
const SOLVER_AGREEMENT: f64 = 1e-4;

/// Locates the unique minimizer of the scalar loss on `[l_a, u_a]`.
///
/// Requires the theoretical guarantees to hold. A golden-section search
/// narrows the bracket to width `1e-8`; a bisection on the sign of the
/// analytic derivative then pins the stationary point to machine precision.
/// The two solvers cross-check each other: disagreement, or a -,+,- sign
/// pattern of the derivative on a screening grid, is reported as a property
/// violation carrying the witness points.
pub fn optimal_magnitude(cfg: &ScalarLossConfig) -> Result<OptimumReport> {
    let p = &cfg.params;
    if !p.guarantees_hold() {
        return Err(Error::GuaranteesNotSatisfied(format!(
            "lambda_g = {} vs bound {}, u_m = {}",
            p.lambda_g,
            p.lambda_lower_bound(),
            p.u_m
        )));
    }

    // Screen for non-convexity: the derivative of a convex function never
    // returns to negative after turning positive.
    let scan_step = (p.u_a - p.l_a) / (SIGN_SCAN_POINTS - 1) as f64;
    let mut derivs = Vec::with_capacity(SIGN_SCAN_POINTS);
    for i in 0..SIGN_SCAN_POINTS {
        let a = if i + 1 == SIGN_SCAN_POINTS { p.u_a } else { p.l_a + i as f64 * scan_step };
        derivs.push((a, scalar_loss_deriv(a, cfg)?));
    }
    let band = 1e-10 * derivs.iter().map(|(_, d)| d.abs()).fold(0.0, f64::max);
    let mut first_positive: Option<f64> = None;
    let mut last_negative_before: Option<f64> = None;
    for &(a, d) in &derivs {
        if d > band {
            first_positive.get_or_insert(a);
        } else if d < -band {
            match first_positive {
                None => last_negative_before = Some(a),
                Some(pos) => {
                    return Err(Error::PropertyViolation {
                        witnesses: vec![last_negative_before.unwrap_or(p.l_a), pos, a],
                    });
                }
            }
        }
    }

    // Golden-section search on the loss values.
    let mut lo = p.l_a;
    let mut hi = p.u_a;
    let mut iterations = 0usize;
    let mut x1 = hi - GOLDEN_RATIO_COMPLEMENT * (hi - lo);
    let mut x2 = lo + GOLDEN_RATIO_COMPLEMENT * (hi - lo);
    let mut f1 = scalar_loss(x1, cfg)?;
    let mut f2 = scalar_loss(x2, cfg)?;
    while hi - lo > GOLDEN_WIDTH {
        iterations += 1;
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN_RATIO_COMPLEMENT * (hi - lo);
            f1 = scalar_loss(x1, cfg)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN_RATIO_COMPLEMENT * (hi - lo);
            f2 = scalar_loss(x2, cfg)?;
        }
    }
    let golden = 0.5 * (lo + hi);

    let deriv_at_la = scalar_loss_deriv(p.l_a, cfg)?;
    let deriv_at_ua = scalar_loss_deriv(p.u_a, cfg)?;

    // Bisection on the derivative sign refines the stationary point beyond
    // what loss-value comparisons can resolve.
    let a_star = if deriv_at_la >= 0.0 {
        p.l_a
    } else if deriv_at_ua <= 0.0 {
        p.u_a
    } else {
        let mut lo = p.l_a;
        let mut hi = p.u_a;
        while hi - lo > 4.0 * f64::EPSILON * hi.abs().max(1.0) {
            iterations += 1;
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if scalar_loss_deriv(mid, cfg)? < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };

    if (a_star - golden).abs() > SOLVER_AGREEMENT {
        return Err(Error::PropertyViolation { witnesses: vec![golden, a_star] });
    }

    Ok(OptimumReport {
        a_star,
        loss_at_star: scalar_loss(a_star, cfg)?,
        deriv_at_la,
        deriv_at_ua,
        iterations,
    })
}

/// Outcome of a grid convexity check. Failure is a reported result, never a
/// panic: out-of-guarantee configurations are allowed to fail.
#[derive(Debug, Clone, Serialize)]
pub struct ConvexityOutcome {
    pub pass: bool,
    /// Smallest second central difference divided by the squared grid step
    /// (an estimate of the smallest second derivative on the grid).
    pub worst_second_difference: f64,
    /// Abscissa where the worst second difference occurred.
    pub worst_at: f64,
}

/// Positivity threshold for scaled second differences.
const CONVEXITY_TOLERANCE: f64 = 1e-12;

/// Checks strict convexity of the scalar loss through second central
/// differences on a uniform grid over `[l_a, u_a]`.
pub fn convexity_certificate(
    cfg: &ScalarLossConfig,
    grid_points: usize,
) -> Result<ConvexityOutcome> {
    if grid_points < 64 {
        return Err(Error::Config(format!(
            "grid must have at least 64 points, got {grid_points}"
        )));
    }
    let p = &cfg.params;
    let step = (p.u_a - p.l_a) / (grid_points - 1) as f64;
    let mut values = Vec::with_capacity(grid_points);
    for i in 0..grid_points {
        let a = if i + 1 == grid_points { p.u_a } else { p.l_a + i as f64 * step };
        values.push(scalar_loss(a, cfg)?);
    }
    let mut worst = f64::INFINITY;
    let mut worst_at = p.l_a;
    for i in 1..grid_points - 1 {
        let second = (values[i + 1] - 2.0 * values[i] + values[i - 1]) / (step * step);
        if second < worst {
            worst = second;
            worst_at = p.l_a + i as f64 * step;
        }
    }
    Ok(ConvexityOutcome {
        pass: worst > CONVEXITY_TOLERANCE,
        worst_second_difference: worst,
        worst_at,
    })
}

/// Outcome of an ordering check on optimum magnitudes.
#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityOutcome {
    pub pass: bool,
    pub a_stars: Vec<f64>,
    /// Largest increase between consecutive optima (`<= 0` when the sequence
    /// is nonincreasing).
    pub worst_violation: f64,
}

/// Ordering tolerance: increases below the solver tolerance do not fail.
const MONOTONICITY_TOLERANCE: f64 = 1e-6;

fn check_nonincreasing(a_stars: Vec<f64>) -> MonotonicityOutcome {
    let worst_violation =
        a_stars.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    MonotonicityOutcome {
        pass: worst_violation <= MONOTONICITY_TOLERANCE,
        a_stars,
        worst_violation,
    }
}

/// Optimal magnitude per angle, for an ascending angle list inside
/// `[0, pi/2 - u_m]` (the range on which the ordering proof is
/// deterministic). Passes when the optima are nonincreasing in the angle.
pub fn monotonic_in_theta(
    cfg_base: &ScalarLossConfig,
    thetas: &[f64],
) -> Result<MonotonicityOutcome> {
    if thetas.is_empty() {
        return Err(Error::Config("angle list must be non-empty".into()));
    }
    let limit = std::f64::consts::FRAC_PI_2 - cfg_base.params.u_m;
    for pair in thetas.windows(2) {
        if pair[1] < pair[0] {
            return Err(Error::Config(format!(
                "angle list must be ascending, got {} after {}",
                pair[1], pair[0]
            )));
        }
    }
    for &t in thetas {
        if !(0.0..=limit).contains(&t) {
            return Err(Error::Config(format!(
                "angle {t} outside [0, pi/2 - u_m] = [0, {limit}]"
            )));
        }
    }
    let mut a_stars = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let cfg = ScalarLossConfig::new(
            theta,
            cfg_base.inter_class_mass,
            cfg_base.params,
            cfg_base.variant,
        )?;
        a_stars.push(optimal_magnitude(&cfg)?.a_star);
    }
    Ok(check_nonincreasing(a_stars))
}

/// Optimal magnitude per inter-class mass, for an ascending positive list.
/// Passes when the optima are nonincreasing in the mass.
pub fn monotonic_in_mass(
    cfg_base: &ScalarLossConfig,
    masses: &[f64],
) -> Result<MonotonicityOutcome> {
    if masses.is_empty() {
        return Err(Error::Config("mass list must be non-empty".into()));
    }
    for pair in masses.windows(2) {
        if pair[1] < pair[0] {
            return Err(Error::Config(format!(
                "mass list must be ascending, got {} after {}",
                pair[1], pair[0]
            )));
        }
    }
    let mut a_stars = Vec::with_capacity(masses.len());
    for &mass in masses {
        let cfg =
            ScalarLossConfig::new(cfg_base.theta_y, mass, cfg_base.params, cfg_base.variant)?;
        a_stars.push(optimal_magnitude(&cfg)?.a_star);
    }
    Ok(check_nonincreasing(a_stars))
}

/// Probability that a top-`k` correctly classified sample keeps its margined
/// angle inside `[0, pi/2]` when the `n` class angles are uniform:
/// `1 - sum_{i=0}^{k-1} C(n,i) p^i (1-p)^{n-i}` with `p = (pi/2 - m) / pi`,
/// evaluated in log space.
pub fn lemma1_probability(n: u64, k: u64, m_val: f64) -> Result<f64> {
    if k < 1 || k > n {
        return Err(Error::Domain(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
    }
    if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&m_val) {
        return Err(Error::Domain(format!("margin must lie in [0, pi/2], got {m_val}")));
    }
    let p = (std::f64::consts::FRAC_PI_2 - m_val) / std::f64::consts::PI;
    let n_f = n as f64;
    let log_one_minus_p = (-p).ln_1p();
    // log C(n, i) + i log p + (n - i) log(1 - p) for i = 0 .. k-1,
    // accumulated by log-sum-exp.
    let mut term_logs = Vec::with_capacity(k as usize);
    for i in 0..k {
        let i_f = i as f64;
        let term = if i == 0 {
            n_f * log_one_minus_p
        } else {
            let log_choose =
                ln_gamma(n_f + 1.0) - ln_gamma(i_f + 1.0) - ln_gamma(n_f - i_f + 1.0);
            log_choose + i_f * p.ln() + (n_f - i_f) * log_one_minus_p
        };
        term_logs.push(term);
    }
    let max_term = term_logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tail_log = if max_term == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        max_term + term_logs.iter().map(|t| (t - max_term).exp()).sum::<f64>().ln()
    };
    Ok((-tail_log.exp_m1()).clamp(0.0, 1.0))
}

/// A configuration that failed a certificate, with the offending values.
#[derive(Debug, Clone, Serialize)]
pub struct FailureWitness {
    pub theta_y: Option<f64>,
    pub inter_class_mass: Option<f64>,
    pub detail: String,
}

/// One property certified over a set of configurations, exportable as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    pub property: String,
    pub variant: String,
    pub configs_tested: usize,
    pub failures: Vec<FailureWitness>,
    /// Slack of the tightest configuration; its meaning is per property
    /// (smallest scaled second difference, smallest endpoint derivative
    /// magnitude, largest ordering increase negated).
    pub worst_margin: f64,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Draws seeded scalar configurations in the guaranteed regime: angles
/// uniform in `[0, pi/2 - u_m]`, masses log-uniform in `[1, 1000]`.
pub fn sample_configs(
    params: &MagParams,
    variant: LossVariant,
    count: usize,
    seed: u64,
) -> Result<Vec<ScalarLossConfig>> {
    use rand::{Rng, SeedableRng};
    if !params.guarantees_hold() {
        return Err(Error::GuaranteesNotSatisfied(
            "sampled certificates require the guaranteed regime".into(),
        ));
    }
    let limit = std::f64::consts::FRAC_PI_2 - params.u_m;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut configs = Vec::with_capacity(count);
    for _ in 0..count {
        let theta = rng.random_range(0.0..=limit);
        let mass = (rng.random_range(0.0f64..=1.0) * 1000f64.ln()).exp();
        configs.push(ScalarLossConfig::new(theta, mass, *params, variant)?);
    }
    Ok(configs)
}

/// Grid convexity over a set of configurations.
pub fn certify_convexity(
    configs: &[ScalarLossConfig],
    grid_points: usize,
) -> Result<CertificateReport> {
    let variant = configs.first().map(|c| c.variant.to_string()).unwrap_or_default();
    let mut failures = Vec::new();
    let mut worst = f64::INFINITY;
    for cfg in configs {
        let outcome = convexity_certificate(cfg, grid_points)?;
        worst = worst.min(outcome.worst_second_difference);
        if !outcome.pass {
            failures.push(FailureWitness {
                theta_y: Some(cfg.theta_y),
                inter_class_mass: Some(cfg.inter_class_mass),
                detail: format!(
                    "second difference {} at a = {}",
                    outcome.worst_second_difference, outcome.worst_at
                ),
            });
        }
    }
    Ok(CertificateReport {
        property: "convexity".into(),
        variant,
        configs_tested: configs.len(),
        failures,
        worst_margin: worst,
    })
}

/// Endpoint derivative signs (negative at `l_a`, positive at `u_a`) over a
/// set of configurations.
pub fn certify_endpoint_signs(configs: &[ScalarLossConfig]) -> Result<CertificateReport> {
    let variant = configs.first().map(|c| c.variant.to_string()).unwrap_or_default();
    let mut failures = Vec::new();
    let mut worst = f64::INFINITY;
    for cfg in configs {
        let report = optimal_magnitude(cfg)?;
        let slack = (-report.deriv_at_la).min(report.deriv_at_ua);
        worst = worst.min(slack);
        if !(report.deriv_at_la < 0.0 && report.deriv_at_ua > 0.0) {
            failures.push(FailureWitness {
                theta_y: Some(cfg.theta_y),
                inter_class_mass: Some(cfg.inter_class_mass),
                detail: format!(
                    "derivative at l_a = {}, at u_a = {}",
                    report.deriv_at_la, report.deriv_at_ua
                ),
            });
        }
    }
    Ok(CertificateReport {
        property: "endpoint-signs".into(),
        variant,
        configs_tested: configs.len(),
        failures,
        worst_margin: worst,
    })
}

/// Ordering of the optimum in the angle, run once per base mass.
pub fn certify_monotonic_in_theta(
    params: &MagParams,
    variant: LossVariant,
    thetas: &[f64],
    base_masses: &[f64],
) -> Result<CertificateReport> {
    let mut failures = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for &mass in base_masses {
        let base = ScalarLossConfig::new(0.0, mass, *params, variant)?;
        let outcome = monotonic_in_theta(&base, thetas)?;
        worst = worst.max(outcome.worst_violation);
        if !outcome.pass {
            failures.push(FailureWitness {
                theta_y: None,
                inter_class_mass: Some(mass),
                detail: format!("optima {:?} not nonincreasing in the angle", outcome.a_stars),
            });
        }
    }
    Ok(CertificateReport {
        property: "monotonic-in-theta".into(),
        variant: variant.to_string(),
        configs_tested: base_masses.len(),
        failures,
        // Negated so that larger is safer, like the other margins.
        worst_margin: -worst,
    })
}

/// Ordering of the optimum in the inter-class mass, run once per base angle.
pub fn certify_monotonic_in_mass(
    params: &MagParams,
    variant: LossVariant,
    base_thetas: &[f64],
    masses: &[f64],
) -> Result<CertificateReport> {
    let mut failures = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for &theta in base_thetas {
        let base = ScalarLossConfig::new(theta, 1.0, *params, variant)?;
        let outcome = monotonic_in_mass(&base, masses)?;
        worst = worst.max(outcome.worst_violation);
        if !outcome.pass {
            failures.push(FailureWitness {
                theta_y: Some(theta),
                inter_class_mass: None,
                detail: format!("optima {:?} not nonincreasing in the mass", outcome.a_stars),
            });
        }
    }
    Ok(CertificateReport {
        property: "monotonic-in-inter-class-mass".into(),
        variant: variant.to_string(),
        configs_tested: base_thetas.len(),
        failures,
        worst_margin: -worst,
    })
}
