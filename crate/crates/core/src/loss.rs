//! Batched forward and analytic backward passes for the angular-margin loss
//! family: fixed-margin losses (additive angle, subtracted cosine) and their
//! magnitude-aware counterparts, plus a central-finite-difference gradient
//! oracle.
//!
//! All variants share one evaluation core. A sample's target logit is
//! `s * phi(cos_theta_y, m)` where `phi` is either `cos(theta + m)` (angular
//! form, computed through the trig identity with `sin_theta =
//! sqrt(max(0, 1 - cos^2))`, never an acos/cos round-trip) or `cos_theta - m`
//! (cosine form). Non-target logits are `s * cos_theta_j`. Per-sample losses
//! use log-sum-exp with max subtraction; the batch loss is the arithmetic
//! mean in fixed sample order.
//!
//! For the angular form with `theta + m > pi` the target logit switches to
//! the monotone linear extension `cos_theta - m*sin(m)`; the switch is
//! recorded per sample in [`SampleLoss::used_fallback`].

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::params::MagParams;

/// Cosines are clamped to `[-1 + COS_EPSILON, 1 - COS_EPSILON]` before any
/// trig identity, keeping `sin_theta` bounded away from zero.
pub const COS_EPSILON: f64 = 1e-7;

/// A batch of unnormalized embeddings with class labels.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    values: Array2<f64>,
    labels: Vec<usize>,
}

impl FeatureBatch {
    /// Builds a batch, rejecting empty shapes, label/row count mismatches,
    /// and rows without a strictly positive finite norm.
    pub fn new(values: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Config(format!(
                "feature batch must be non-empty, got shape {:?}",
                values.dim()
            )));
        }
        if labels.len() != values.nrows() {
            return Err(Error::Config(format!(
                "label count {} does not match batch rows {}",
                labels.len(),
                values.nrows()
            )));
        }
        for (i, row) in values.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Domain(format!(
                    "feature row {i} must have a strictly positive finite norm, got {norm}"
                )));
            }
        }
        Ok(FeatureBatch { values, labels })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Euclidean norms of the rows.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.values
            .outer_iter()
            .map(|row| row.dot(&row).sqrt())
            .collect()
    }
}

/// Class-center weight rows. Rows are renormalized to unit length inside
/// every forward pass; only their direction matters.
#[derive(Debug, Clone)]
pub struct ClassHead {
    weights: Array2<f64>,
}

impl ClassHead {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::Config(format!(
                "class head must be non-empty, got shape {:?}",
                weights.dim()
            )));
        }
        for (j, row) in weights.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Domain(format!(
                    "head row {j} must have a strictly positive finite norm, got {norm}"
                )));
            }
        }
        Ok(ClassHead { weights })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Mutable access for optimizer updates; row norms are re-validated on
    /// the next forward pass.
    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Per-sample terms of the loss.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    /// True feature norm `a_i` (never clamped).
    pub magnitude: f64,
    /// Clamped cosine to the own class center.
    pub cos_theta_y: f64,
    /// Margin applied to this sample (fixed, or evaluated at the clamped
    /// magnitude).
    pub margin_applied: f64,
    /// Target logit `s * phi`.
    pub a_term: f64,
    /// Raw inter-class mass `sum_{j != y} exp(s cos_theta_j)`.
    pub b_term: f64,
    /// Regularizer contribution `lambda_g * g(clamped a_i)`.
    pub reg_term: f64,
    /// Total per-sample loss.
    pub loss: f64,
    /// Whether the angular form took the `theta + m > pi` linear extension.
    pub used_fallback: bool,
}

/// Forward (and optionally backward) results for one batch.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub samples: Vec<SampleLoss>,
    /// Arithmetic mean of the per-sample losses in fixed sample order.
    pub batch_mean: f64,
    /// `d batch_mean / d features`, filled by the backward entry points.
    pub grad_features: Option<Array2<f64>>,
    /// `d batch_mean / d head weights`, filled by the backward entry points.
    pub grad_head: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MarginForm {
    /// Additive angular margin: target logit `s cos(theta + m)`.
    Angular,
    /// Subtractive cosine margin: target logit `s (cos theta - m)`.
    Cosine,
}

/// Internal description of one loss variant.
struct VariantSpec<'a> {
    form: MarginForm,
    scale: f64,
    fixed_margin: Option<f64>,
    mag: Option<&'a MagParams>,
}

impl<'a> VariantSpec<'a> {
    fn fixed(form: MarginForm, scale: f64, margin: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {scale}")));
        }
        if !(0.0..=std::f64::consts::PI).contains(&margin) {
            return Err(Error::Config(format!("margin must lie in [0, pi], got {margin}")));
        }
        Ok(VariantSpec { form, scale, fixed_margin: Some(margin), mag: None })
    }

    fn magnitude_aware(form: MarginForm, params: &'a MagParams) -> Self {
        VariantSpec { form, scale: params.s, fixed_margin: None, mag: Some(params) }
    }

    fn margin_at(&self, a: f64) -> f64 {
        match (self.fixed_margin, self.mag) {
            (Some(m), _) => m,
            (None, Some(p)) => p.margin(a),
            (None, None) => unreachable!("variant has either a fixed or magnitude-aware margin"),
        }
    }

    fn margin_deriv_at(&self, a: f64) -> f64 {
        match self.mag {
            Some(p) => p.margin_deriv(a),
            None => 0.0,
        }
    }

    /// Regularizer value and its magnitude derivative, both zero for the
    /// fixed-margin variants. The derivative is the clamp subgradient: zero
    /// at and outside the magnitude bounds.
    fn reg_at(&self, a: f64) -> Result<(f64, f64)> {
        match self.mag {
            Some(p) => {
                let value = p.lambda_g * p.regularizer(p.clamp_magnitude(a))?;
                let deriv = if a > p.l_a && a < p.u_a {
                    p.lambda_g * p.regularizer_deriv(a)?
                } else {
                    0.0
                };
                Ok((value, deriv))
            }
            None => Ok((0.0, 0.0)),
        }
    }
}

/// Unit-normalizes the rows of a matrix, returning the unit rows and norms.
fn normalize_rows(m: &Array2<f64>, what: &str) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for (i, mut row) in unit.outer_iter_mut().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Domain(format!(
                "{what} row {i} must have a strictly positive finite norm, got {norm}"
            )));
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok((unit, norms))
}

/// Pairwise cosines between batch rows and head rows, entry `(i, j)` clamped
/// to `[-1 + COS_EPSILON, 1 - COS_EPSILON]`.
pub fn cosine_logits(batch: &FeatureBatch, head: &ClassHead) -> Result<Array2<f64>> {
    if batch.dim() != head.dim() {
        return Err(Error::Config(format!(
            "feature dim {} does not match head dim {}",
            batch.dim(),
            head.dim()
        )));
    }
    let (feat_unit, _) = normalize_rows(batch.values(), "feature")?;
    let (head_unit, _) = normalize_rows(head.weights(), "head")?;
    let hi = 1.0 - COS_EPSILON;
    let mut cos = feat_unit.dot(&head_unit.t());
    cos.mapv_inplace(|v| v.clamp(-hi, hi));
    Ok(cos)
}

fn evaluate(
    batch: &FeatureBatch,
    head: &ClassHead,
    var: &VariantSpec<'_>,
    with_grad: bool,
) -> Result<LossBreakdown> {
    let n_classes = head.n_classes();
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "at least 2 classes are required (the inter-class sum would be empty), got {n_classes}"
        )));
    }
    if batch.dim() != head.dim() {
        return Err(Error::Config(format!(
            "feature dim {} does not match head dim {}",
            batch.dim(),
            head.dim()
        )));
    }
    for (i, &y) in batch.labels().iter().enumerate() {
        if y >= n_classes {
            return Err(Error::Config(format!(
                "label {y} of sample {i} exceeds the class count {n_classes}"
            )));
        }
    }

    let n_batch = batch.len();
    let (feat_unit, feat_norms) = normalize_rows(batch.values(), "feature")?;
    let (head_unit, head_norms) = normalize_rows(head.weights(), "head")?;
    let hi = 1.0 - COS_EPSILON;
    let mut cos = feat_unit.dot(&head_unit.t());
    cos.mapv_inplace(|v| v.clamp(-hi, hi));

    let mut samples = Vec::with_capacity(n_batch);
    let mut loss_sum = 0.0;
    // dL_i/dcos(i,j) and the direct dL_i/da_i, filled only when needed.
    let mut coeff = if with_grad { Some(Array2::<f64>::zeros((n_batch, n_classes))) } else { None };
    let mut radial = vec![0.0; n_batch];

    for i in 0..n_batch {
        let y = batch.labels()[i];
        let a = feat_norms[i];
        let cos_y = cos[[i, y]];
        let margin = var.margin_at(a);

        // Target logit phi, its cosine sensitivity, and its margin
        // sensitivity.
        let (phi, dphi_dcos, dphi_dmargin, used_fallback) = match var.form {
            MarginForm::Angular => {
                let (sin_m, cos_m) = margin.sin_cos();
                let sin_y = (1.0 - cos_y * cos_y).max(0.0).sqrt();
                if cos_y >= -cos_m {
                    // theta + m <= pi: exact angle addition.
                    (
                        cos_y * cos_m - sin_y * sin_m,
                        cos_m + cos_y * sin_m / sin_y,
                        -(sin_y * cos_m + cos_y * sin_m),
                        false,
                    )
                } else {
                    // Monotone linear extension past theta + m = pi.
                    (cos_y - margin * sin_m, 1.0, -(sin_m + margin * cos_m), true)
                }
            }
            MarginForm::Cosine => (cos_y - margin, 1.0, -1.0, false),
        };
        let target_logit = var.scale * phi;

        // Stable log-sum-exp over the modified logit row.
        let mut max_logit = target_logit;
        for j in 0..n_classes {
            if j != y {
                max_logit = max_logit.max(var.scale * cos[[i, j]]);
            }
        }
        let mut exp_sum = 0.0;
        let mut b_term = 0.0;
        for j in 0..n_classes {
            let z = if j == y { target_logit } else { var.scale * cos[[i, j]] };
            exp_sum += (z - max_logit).exp();
            if j != y {
                b_term += (var.scale * cos[[i, j]]).exp();
            }
        }
        let lse = max_logit + exp_sum.ln();
        let classification = lse - target_logit;
        let (reg_term, reg_deriv) = var.reg_at(a)?;
        let loss = classification + reg_term;
        loss_sum += loss;

        if let Some(coeff) = coeff.as_mut() {
            let p_y = (target_logit - lse).exp();
            for j in 0..n_classes {
                let c = cos[[i, j]];
                // The clamp is a flat region: no gradient through a
                // saturated cosine.
                if c >= hi || c <= -hi {
                    continue;
                }
                if j == y {
                    coeff[[i, j]] = (p_y - 1.0) * var.scale * dphi_dcos;
                } else {
                    let p_j = (var.scale * c - lse).exp();
                    coeff[[i, j]] = p_j * var.scale;
                }
            }
            radial[i] =
                (p_y - 1.0) * var.scale * dphi_dmargin * var.margin_deriv_at(a) + reg_deriv;
        }

        samples.push(SampleLoss {
            magnitude: a,
            cos_theta_y: cos_y,
            margin_applied: margin,
            a_term: target_logit,
            b_term,
            reg_term,
            loss,
            used_fallback,
        });
    }

    let batch_mean = loss_sum / n_batch as f64;

    let (grad_features, grad_head) = if let Some(coeff) = coeff {
        let inv_n = 1.0 / n_batch as f64;
        let weighted = &coeff * &cos;

        // grad f_i = [sum_j C_ij w_hat_j - (sum_j C_ij cos_ij) u_i] / a_i
        //            + radial_i * u_i, then / N.
        let toward_heads = coeff.dot(&head_unit);
        let cos_row_sums = weighted.sum_axis(Axis(1));
        let mut grad_f = Array2::<f64>::zeros((n_batch, batch.dim()));
        for i in 0..n_batch {
            let u = feat_unit.row(i);
            let mut row = grad_f.row_mut(i);
            for (k, g) in row.iter_mut().enumerate() {
                let angular = (toward_heads[[i, k]] - cos_row_sums[i] * u[k]) / feat_norms[i];
                *g = (angular + radial[i] * u[k]) * inv_n;
            }
        }

        // grad w_j = [sum_i C_ij u_i - (sum_i C_ij cos_ij) w_hat_j]
        //            / ||w_j||, then / N.
        let toward_feats = coeff.t().dot(&feat_unit);
        let cos_col_sums = weighted.sum_axis(Axis(0));
        let mut grad_w = Array2::<f64>::zeros((n_classes, head.dim()));
        for j in 0..n_classes {
            let w_hat = head_unit.row(j);
            let mut row = grad_w.row_mut(j);
            for (k, g) in row.iter_mut().enumerate() {
                *g = (toward_feats[[j, k]] - cos_col_sums[j] * w_hat[k]) / head_norms[j] * inv_n;
            }
        }
        (Some(grad_f), Some(grad_w))
    } else {
        (None, None)
    };

    Ok(LossBreakdown { samples, batch_mean, grad_features, grad_head })
}

/// Magnitude-aware angular-margin loss, forward only.
pub fn magface_forward(
    batch: &FeatureBatch,
    head: &ClassHead,
    params: &MagParams,
) -> Result<LossBreakdown> {
    evaluate(batch, head, &VariantSpec::magnitude_aware(MarginForm::Angular, params), false)
}

/// Magnitude-aware angular-margin loss with analytic gradients. The
/// magnitude gradient flows through the margin, the regularizer, and the
/// feature normalization inside every cosine; both magnitude paths are cut
/// where the clamp is active.
pub fn magface_backward(
    batch: &FeatureBatch,
    head: &ClassHead,
    params: &MagParams,
) -> Result<LossBreakdown> {
    evaluate(batch, head, &VariantSpec::magnitude_aware(MarginForm::Angular, params), true)
}

/// Fixed additive angular margin on the target logit only.
pub fn arcface_forward(
    batch: &FeatureBatch,
    head: &ClassHead,
    scale: f64,
    margin: f64,
) -> Result<LossBreakdown> {
    evaluate(batch, head, &VariantSpec::fixed(MarginForm::Angular, scale, margin)?, false)
}

/// [`arcface_forward`] with analytic gradients.
pub fn arcface_backward(
    batch: &FeatureBatch,
    head: &ClassHead,
    scale: f64,
    margin: f64,
) -> Result<LossBreakdown> {
    evaluate(batch, head, &VariantSpec::fixed(MarginForm::Angular, scale, margin)?, true)
}

/// Fixed margin subtracted from the target cosine.
pub fn cosface_forward(
    batch: &FeatureBatch,
    head: &ClassHead,
    scale: f64,
    margin: f64,
) -> Result<LossBreakdown> {
    evaluate(batch, head, &VariantSpec::fixed(MarginForm::Cosine, scale, margin)?, false)
}

/// [`cosface_forward`] with analytic gradients.
pub fn cosface_backward(
    batch: &FeatureBatch,
    head: &ClassHead,
    scale: f64,
    margin: f64,
) -> Result<LossBreakdown> {
    evaluate(batch, head, &VariantSpec::fixed(MarginForm::Cosine, scale, margin)?, true)
}

/// Magnitude-aware margin subtracted from the target cosine.
pub fn magcosface_forward(
    batch: &FeatureBatch,
    head: &ClassHead,
    params: &MagParams,
) -> Result<LossBreakdown> {
    evaluate(batch, head, &VariantSpec::magnitude_aware(MarginForm::Cosine, params), false)
}

/// [`magcosface_forward`] with analytic gradients.
pub fn magcosface_backward(
    batch: &FeatureBatch,
    head: &ClassHead,
    params: &MagParams,
) -> Result<LossBreakdown> {
    evaluate(batch, head, &VariantSpec::magnitude_aware(MarginForm::Cosine, params), true)
}

/// Central-difference gradient of a batch-mean loss with respect to every
/// feature coordinate and every head coordinate: the gradient oracle the
/// analytic backward passes are checked against.
pub fn finite_diff_grad<F>(
    loss_fn: F,
    batch: &FeatureBatch,
    head: &ClassHead,
    step: f64,
) -> Result<(Array2<f64>, Array2<f64>)>
where
    F: Fn(&FeatureBatch, &ClassHead) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    let mut grad_f = Array2::<f64>::zeros(batch.values().dim());
    for idx in 0..batch.values().len() {
        let (r, c) = (idx / batch.dim(), idx % batch.dim());
        let mut plus = batch.values().clone();
        plus[[r, c]] += step;
        let mut minus = batch.values().clone();
        minus[[r, c]] -= step;
        let f_plus = loss_fn(&FeatureBatch::new(plus, batch.labels().to_vec())?, head)?;
        let f_minus = loss_fn(&FeatureBatch::new(minus, batch.labels().to_vec())?, head)?;
        grad_f[[r, c]] = (f_plus - f_minus) / (2.0 * step);
    }
    let mut grad_w = Array2::<f64>::zeros(head.weights().dim());
    for idx in 0..head.weights().len() {
        let (r, c) = (idx / head.dim(), idx % head.dim());
        let mut plus = head.weights().clone();
        plus[[r, c]] += step;
        let mut minus = head.weights().clone();
        minus[[r, c]] -= step;
        let f_plus = loss_fn(batch, &ClassHead::new(plus)?)?;
        let f_minus = loss_fn(batch, &ClassHead::new(minus)?)?;
        grad_w[[r, c]] = (f_plus - f_minus) / (2.0 * step);
    }
    Ok((grad_f, grad_w))
}

/// Max absolute deviation between two gradient matrices, normalized by the
/// max-norm of the reference.
///
/// The scale is floored at `1e-4`: central differences with step `h` carry
/// roundoff noise of order `eps * |loss| / (2h)` (about `1e-10` here), so a
/// reference whose entries all sit below the floor cannot support a
/// relative comparison; deviations are then measured against the floor.
pub fn max_relative_grad_error(analytic: &Array2<f64>, reference: &Array2<f64>) -> f64 {
    let max_abs_diff = analytic
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    max_abs_diff / scale.max(1e-4)
}
