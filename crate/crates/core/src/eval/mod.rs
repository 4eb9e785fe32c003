//! Verification metrics, error-versus-reject quality curves, and identity
//! aggregation.
//!
//! Score conventions: higher cosine means more similar; a pair is accepted
//! at threshold `t` when its score is `>= t`, so tied scores always fall on
//! the same side. Thresholds are chosen from the observed impostor scores
//! plus `+inf`: the smallest observed score whose false match rate meets the
//! target.

pub mod clustering;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

/// Verification pair list over a shared embedding table.
#[derive(Debug, Clone)]
pub struct PairProtocol {
    /// `(index_a, index_b, is_genuine)` triples.
    pub pairs: Vec<(usize, usize, bool)>,
}

impl PairProtocol {
    /// Checks indices against the embedding count and requires at least one
    /// genuine and one impostor pair.
    pub fn validate(&self, n_embeddings: usize) -> Result<()> {
        let mut genuine = 0usize;
        let mut impostor = 0usize;
        for &(a, b, is_genuine) in &self.pairs {
            if a >= n_embeddings || b >= n_embeddings {
                return Err(Error::Config(format!(
                    "pair ({a}, {b}) references an embedding outside 0..{n_embeddings}"
                )));
            }
            if is_genuine {
                genuine += 1;
            } else {
                impostor += 1;
            }
        }
        if genuine == 0 || impostor == 0 {
            return Err(Error::Config(format!(
                "threshold metrics need both pair kinds, got {genuine} genuine and {impostor} impostor"
            )));
        }
        Ok(())
    }
}

/// Where a quality score came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum QualitySource {
    Magnitude,
    External,
}

/// Per-embedding quality scores; higher is better.
#[derive(Debug, Clone)]
pub struct QualityScores {
    pub values: Vec<f64>,
    pub source: QualitySource,
}

impl QualityScores {
    pub fn validate(&self, n_embeddings: usize) -> Result<()> {
        if self.values.len() != n_embeddings {
            return Err(Error::Config(format!(
                "{} quality scores for {n_embeddings} embeddings",
                self.values.len()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("quality scores must be finite, got {v}")));
        }
        Ok(())
    }
}

/// Cosine similarity of two raw vectors.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let norm_a = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm_a > 0.0 && norm_a.is_finite() && norm_b > 0.0 && norm_b.is_finite()) {
        return Err(Error::Domain("cosine score requires nonzero finite vectors".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (norm_a * norm_b))
}

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Domain(format!("{name} score list must be non-empty")));
    }
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{name} scores must be finite, got {v}")));
    }
    Ok(())
}

/// False non-match rate at a false match rate target.
///
/// The threshold is the smallest candidate `t` with
/// `#(impostor >= t) / n_impostor <= fmr_target`, candidates being the
/// observed impostor scores plus the accept-no-impostor sentinel just above
/// the largest of them; the returned FNMR is `#(genuine < t) / n_genuine`.
pub fn fnmr_at_fmr(genuine: &[f64], impostor: &[f64], fmr_target: f64) -> Result<(f64, f64)> {
    check_scores("genuine", genuine)?;
    check_scores("impostor", impostor)?;
    if !(fmr_target > 0.0 && fmr_target <= 1.0) {
        return Err(Error::Domain(format!("fmr target must lie in (0, 1], got {fmr_target}")));
    }
    let mut sorted = impostor.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = sorted.len();
    // No observed score may qualify (a tied block can keep the FMR above
    // the target all the way up); the sentinel then accepts no impostor
    // while still accepting every strictly better genuine score.
    let mut threshold = next_up(sorted[n - 1]);
    let mut i = 0;
    while i < n {
        // First occurrence of each distinct score: #(impostor >= t) = n - i.
        let fmr = (n - i) as f64 / n as f64;
        if fmr <= fmr_target {
            threshold = sorted[i];
            break;
        }
        let mut j = i + 1;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        i = j;
    }
    let misses = genuine.iter().filter(|&&g| g < threshold).count();
    Ok((threshold, misses as f64 / genuine.len() as f64))
}

/// Smallest f64 strictly greater than `v` (finite input).
fn next_up(v: f64) -> f64 {
    let bits = v.to_bits();
    let next = if v >= 0.0 { bits + 1 } else { bits - 1 };
    if v == 0.0 {
        f64::from_bits(1)
    } else {
        f64::from_bits(next)
    }
}

/// True accept rate at a false accept rate target: `1 - FNMR` under the
/// same threshold rule.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far_target: f64) -> Result<f64> {
    let (_, fnmr) = fnmr_at_fmr(genuine, impostor, far_target)?;
    Ok(1.0 - fnmr)
}

/// FNMR as a function of the fraction of lowest-quality embeddings removed.
#[derive(Debug, Clone, Serialize)]
pub struct RejectCurve {
    pub reject_fractions: Vec<f64>,
    /// FNMR per fraction; NaN where the point is invalid.
    pub fnmr_values: Vec<f64>,
    /// False where a fraction left no genuine or no impostor pairs.
    pub valid: Vec<bool>,
    pub fmr_target: f64,
}

impl RejectCurve {
    /// CSV export: `reject_fraction,fnmr,valid`, one row per point.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["reject_fraction", "fnmr", "valid"])?;
        for i in 0..self.reject_fractions.len() {
            let fnmr = if self.valid[i] {
                format!("{:.16e}", self.fnmr_values[i])
            } else {
                "NaN".to_string()
            };
            w.write_record([
                format!("{:.16e}", self.reject_fractions[i]),
                fnmr,
                self.valid[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Error-versus-reject curve.
///
/// For each fraction `r`, embeddings whose quality falls strictly below the
/// quality at rank `floor(r * M)` (ascending) are dropped, pairs touching a
/// dropped embedding are discarded, and FNMR at the FMR target is recomputed
/// on the survivors (threshold re-derived per point). Tied qualities stay
/// together: with all-equal qualities nothing is ever dropped, and with
/// distinct qualities exactly `floor(r * M)` embeddings are. Points with an
/// empty side are flagged invalid rather than omitted.
pub fn error_versus_reject(
    protocol: &PairProtocol,
    embeddings: &Array2<f64>,
    qualities: &QualityScores,
    fractions: &[f64],
    fmr_target: f64,
) -> Result<RejectCurve> {
    let m = embeddings.nrows();
    protocol.validate(m)?;
    qualities.validate(m)?;
    if fractions.is_empty() {
        return Err(Error::Config("fraction list must be non-empty".into()));
    }
    for pair in fractions.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Config(format!(
                "fractions must be strictly ascending, got {} after {}",
                pair[1], pair[0]
            )));
        }
    }
    for &r in fractions {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Config(format!("fractions must lie in [0, 1), got {r}")));
        }
    }

    // Pair scores never change across fractions; compute them once.
    let mut scored = Vec::with_capacity(protocol.pairs.len());
    for &(a, b, is_genuine) in &protocol.pairs {
        let score = cosine_score(
            embeddings.row(a).as_slice().expect("contiguous row"),
            embeddings.row(b).as_slice().expect("contiguous row"),
        )?;
        scored.push((a, b, is_genuine, score));
    }

    let mut sorted_q = qualities.values.clone();
    sorted_q.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));

    let mut fnmr_values = Vec::with_capacity(fractions.len());
    let mut valid = Vec::with_capacity(fractions.len());
    for &r in fractions {
        let cut_rank = (r * m as f64).floor() as usize;
        let q_threshold = sorted_q[cut_rank.min(m - 1)];
        let survives: Vec<bool> =
            qualities.values.iter().map(|&q| q >= q_threshold).collect();
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for &(a, b, is_genuine, score) in &scored {
            if survives[a] && survives[b] {
                if is_genuine {
                    genuine.push(score);
                } else {
                    impostor.push(score);
                }
            }
        }
        if genuine.is_empty() || impostor.is_empty() {
            fnmr_values.push(f64::NAN);
            valid.push(false);
        } else {
            let (_, fnmr) = fnmr_at_fmr(&genuine, &impostor, fmr_target)?;
            fnmr_values.push(fnmr);
            valid.push(true);
        }
    }
    Ok(RejectCurve { reject_fractions: fractions.to_vec(), fnmr_values, valid, fmr_target })
}

fn normalize_or_reject(sum: Vec<f64>) -> Result<Vec<f64>> {
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12 && norm.is_finite()) {
        return Err(Error::DegenerateAggregation);
    }
    Ok(sum.into_iter().map(|v| v / norm).collect())
}

/// Direction-only template: normalize the sum of normalized features.
pub fn aggregate_mean(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(Error::Config("aggregation needs at least one feature".into()));
    }
    let dim = features[0].len();
    let mut sum = vec![0.0; dim];
    for f in features {
        if f.len() != dim {
            return Err(Error::Config("aggregation features must share a dimension".into()));
        }
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Domain("aggregation features must have nonzero norm".into()));
        }
        for (acc, v) in sum.iter_mut().zip(f) {
            *acc += v / norm;
        }
    }
    normalize_or_reject(sum)
}

/// Magnitude-weighted template: normalize the sum of raw features, so each
/// direction is weighted by its magnitude.
pub fn aggregate_magface_plus(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(Error::Config("aggregation needs at least one feature".into()));
    }
    let dim = features[0].len();
    let mut sum = vec![0.0; dim];
    for f in features {
        if f.len() != dim {
            return Err(Error::Config("aggregation features must share a dimension".into()));
        }
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Domain("aggregation features must have nonzero norm".into()));
        }
        for (acc, v) in sum.iter_mut().zip(f) {
            *acc += v;
        }
    }
    normalize_or_reject(sum)
}
