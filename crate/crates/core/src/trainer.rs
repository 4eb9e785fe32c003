//! Synthetic quality-controlled embedding data and a small deterministic
//! trainer.
//!
//! Each class is a prototype direction on the unit sphere of the input
//! space; a sample is the prototype rotated by `(1 - q) * quality_noise_max`
//! radians in a random tangent direction, where `q ~ Uniform[0, 1)` is the
//! sample's quality. Training fits a two-layer dense embedding network
//! (input -> hidden tanh -> embedding, no bias on the final layer) jointly
//! with a [`ClassHead`] by mini-batch SGD with momentum and weight decay.
//! Runs are bit-reproducible: seeded initialization, seeded shuffles, and
//! fixed-order reductions.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{
    arcface_backward, cosface_backward, magcosface_backward, magface_backward, ClassHead,
    FeatureBatch, LossBreakdown,
};
use crate::params::MagParams;

/// Shape of a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim_input: usize,
    pub dim_embed: usize,
    pub samples_per_class: usize,
    /// Maximum angular perturbation, radians; a sample of quality `q` is
    /// rotated by `(1 - q)` times this.
    pub quality_noise_max: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.dim_input < 2 || self.dim_embed < 2 {
            return Err(Error::Config(format!(
                "dimensions must be at least 2, got input {} embed {}",
                self.dim_input, self.dim_embed
            )));
        }
        if self.samples_per_class < 1 {
            return Err(Error::Config("need at least one sample per class".into()));
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.quality_noise_max) {
            return Err(Error::Config(format!(
                "quality_noise_max must lie in [0, pi/2], got {}",
                self.quality_noise_max
            )));
        }
        Ok(())
    }
}

/// One synthetic sample: a unit input vector, its class, and its quality
/// (1 = clean).
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub input: Vec<f64>,
    pub label: usize,
    pub true_quality: f64,
}

fn random_unit_vector(rng: &mut ChaCha12Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit vector orthogonal to `axis`.
fn random_tangent(rng: &mut ChaCha12Rng, axis: &[f64]) -> Vec<f64> {
    loop {
        let g = random_unit_vector(rng, axis.len());
        let along: f64 = g.iter().zip(axis).map(|(a, b)| a * b).sum();
        let t: Vec<f64> = g.iter().zip(axis).map(|(a, b)| a - along * b).collect();
        let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return t.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates the dataset in class-major order, deterministically for a
/// given seed.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> =
        (0..spec.n_classes).map(|_| random_unit_vector(&mut rng, spec.dim_input)).collect();
    let mut samples = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for (label, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let quality: f64 = rng.random_range(0.0..1.0);
            let tangent = random_tangent(&mut rng, proto);
            let angle = (1.0 - quality) * spec.quality_noise_max;
            let (sin_a, cos_a) = angle.sin_cos();
            let input: Vec<f64> =
                proto.iter().zip(&tangent).map(|(p, t)| cos_a * p + sin_a * t).collect();
            samples.push(LabeledSample { input, label, true_quality: quality });
        }
    }
    Ok(samples)
}

/// The loss driving a training run. `softmax` is the zero-margin normalized
/// softmax (scaled cosine logits only); the magnitude-aware variants carry
/// full [`MagParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "loss_variant", rename_all = "lowercase")]
pub enum LossSpec {
    Softmax { s: f64 },
    ArcFace { s: f64, m: f64 },
    CosFace { s: f64, m: f64 },
    MagFace { params: MagParams },
    MagCosFace { params: MagParams },
}

impl LossSpec {
    fn backward(&self, batch: &FeatureBatch, head: &ClassHead) -> Result<LossBreakdown> {
        match self {
            LossSpec::Softmax { s } => arcface_backward(batch, head, *s, 0.0),
            LossSpec::ArcFace { s, m } => arcface_backward(batch, head, *s, *m),
            LossSpec::CosFace { s, m } => cosface_backward(batch, head, *s, *m),
            LossSpec::MagFace { params } => magface_backward(batch, head, params),
            LossSpec::MagCosFace { params } => magcosface_backward(batch, head, params),
        }
    }

    fn default_init_magnitude(&self) -> Option<f64> {
        match self {
            LossSpec::MagFace { params } | LossSpec::MagCosFace { params } => {
                Some(0.5 * (params.l_a + params.u_a))
            }
            _ => None,
        }
    }
}

/// Step schedule: the rate starts at `initial` and is multiplied by
/// `decay_factor` at each 0-indexed epoch listed in `decay_epochs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearningRateSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
}

fn default_decay_factor() -> f64 {
    0.1
}

impl LearningRateSchedule {
    fn at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.initial * self.decay_factor.powi(decays as i32)
    }
}

fn default_hidden_width() -> usize {
    64
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub loss: LossSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: LearningRateSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    /// Mean embedding magnitude the freshly initialized network is rescaled
    /// to; defaults to the middle of the magnitude interval for the
    /// magnitude-aware losses and to no rescaling otherwise.
    #[serde(default)]
    pub init_magnitude: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_width == 0 {
            return Err(Error::Config(
                "epochs, batch_size and hidden_width must be positive".into(),
            ));
        }
        if !(self.learning_rate.initial > 0.0) {
            return Err(Error::Config(format!(
                "initial learning rate must be positive, got {}",
                self.learning_rate.initial
            )));
        }
        if !(self.learning_rate.decay_factor > 0.0) {
            return Err(Error::Config("decay factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Two dense layers: `embed(x) = W2 tanh(W1 x + b1)`, no final bias.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
}

impl EmbeddingNet {
    /// Hidden activations for a batch of inputs (rows).
    fn hidden(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let mut h = inputs.dot(&self.w1.t());
        h += &self.b1;
        h.mapv_inplace(f64::tanh);
        h
    }

    /// Embeddings for a batch of inputs (rows).
    pub fn embed(&self, inputs: &Array2<f64>) -> Array2<f64> {
        self.hidden(inputs).dot(&self.w2.t())
    }
}

/// A trained embedding network with its class head.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: EmbeddingNet,
    pub head: ClassHead,
}

/// Per-sample record exported to CSV in dataset order.
#[derive(Debug, Clone, Serialize)]
pub struct SampleStat {
    pub label: usize,
    pub true_quality: f64,
    pub magnitude: f64,
    pub cos_theta_y: f64,
}

/// Magnitude statistics of a model over a dataset.
#[derive(Debug, Clone, Serialize)]
pub struct MagnitudeStats {
    pub samples: Vec<SampleStat>,
    /// Pearson correlation between magnitudes and target cosines; `None`
    /// flags a degenerate (zero-variance) input instead of propagating NaN.
    pub pearson_mag_cos: Option<f64>,
    /// Spearman rank correlation between magnitudes and true qualities.
    pub spearman_mag_quality: Option<f64>,
    /// Fraction of samples whose nearest class center is their own label.
    pub nearest_center_accuracy: f64,
}

/// Everything a training run reports.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// Mean loss per epoch, in epoch order.
    pub loss_history: Vec<f64>,
    pub samples: Vec<SampleStat>,
    pub pearson_mag_cos: Option<f64>,
    pub spearman_mag_quality: Option<f64>,
    pub nearest_center_accuracy: f64,
    /// Factor the final layer was rescaled by so that initial magnitudes
    /// land at the configured mean.
    pub init_magnitude_scale: f64,
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub report: TrainReport,
}

fn dataset_arrays(dataset: &[LabeledSample]) -> Result<(Array2<f64>, Vec<usize>, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset must be non-empty".into()));
    }
    let dim = dataset[0].input.len();
    let mut inputs = Array2::<f64>::zeros((dataset.len(), dim));
    let mut labels = Vec::with_capacity(dataset.len());
    let mut qualities = Vec::with_capacity(dataset.len());
    for (i, sample) in dataset.iter().enumerate() {
        if sample.input.len() != dim {
            return Err(Error::Config(format!(
                "sample {i} has dimension {} but sample 0 has {dim}",
                sample.input.len()
            )));
        }
        for (k, &v) in sample.input.iter().enumerate() {
            inputs[[i, k]] = v;
        }
        labels.push(sample.label);
        qualities.push(sample.true_quality);
    }
    Ok((inputs, labels, qualities))
}

fn gaussian_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal) * scale;
    }
    m
}

fn sgd_step(
    weights: &mut Array2<f64>,
    velocity: &mut Array2<f64>,
    grad: &Array2<f64>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    ndarray::Zip::from(weights).and(velocity).and(grad).for_each(|w, v, g| {
        *v = momentum * *v - lr * (g + weight_decay * *w);
        *w += *v;
    });
}

/// Trains the embedding network and class head on the dataset.
///
/// `dim_embed` is the embedding width (a property of the dataset spec, not
/// of the optimizer settings). Deterministic for fixed inputs: the same
/// seed produces a bit-identical [`TrainReport`].
pub fn train(
    dataset: &[LabeledSample],
    dim_embed: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dim_embed < 2 {
        return Err(Error::Config(format!("dim_embed must be at least 2, got {dim_embed}")));
    }
    let (inputs, labels, qualities) = dataset_arrays(dataset)?;
    let n_classes = labels.iter().copied().max().unwrap() + 1;
    if n_classes < 2 {
        return Err(Error::Config("training needs at least 2 classes".into()));
    }
    let dim_input = inputs.ncols();
    let hidden = cfg.hidden_width;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut net = EmbeddingNet {
        w1: gaussian_matrix(&mut rng, hidden, dim_input, 1.0 / (dim_input as f64).sqrt()),
        b1: Array1::zeros(hidden),
        w2: gaussian_matrix(&mut rng, dim_embed, hidden, 1.0 / (hidden as f64).sqrt()),
    };
    let mut head = ClassHead::new(gaussian_matrix(
        &mut rng,
        n_classes,
        dim_embed,
        1.0 / (dim_embed as f64).sqrt(),
    ))?;

    // Rescale the final layer so initial magnitudes land at the requested
    // mean (the magnitude interval's center for magnitude-aware losses).
    let init_magnitude_scale =
        match cfg.init_magnitude.or_else(|| cfg.loss.default_init_magnitude()) {
            Some(target) => {
                let mean_mag =
                    net.embed(&inputs).outer_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>()
                        / dataset.len() as f64;
                if !(mean_mag > 0.0) {
                    return Err(Error::Config("initial embeddings collapsed to zero".into()));
                }
                let scale = target / mean_mag;
                net.w2.mapv_inplace(|v| v * scale);
                scale
            }
            None => 1.0,
        };

    let mut vel_w1 = Array2::<f64>::zeros(net.w1.dim());
    let mut vel_b1 = Array1::<f64>::zeros(net.b1.dim());
    let mut vel_w2 = Array2::<f64>::zeros(net.w2.dim());
    let mut vel_head = Array2::<f64>::zeros(head.weights().dim());

    let n_total = dataset.len();
    let mut order: Vec<usize> = (0..n_total).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate.at_epoch(epoch);
        // Fisher-Yates with the run RNG: a fixed shuffle order per seed.
        for i in (1..n_total).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch_inputs = Array2::<f64>::zeros((chunk.len(), dim_input));
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for (row, &idx) in chunk.iter().enumerate() {
                batch_inputs.row_mut(row).assign(&inputs.row(idx));
                batch_labels.push(labels[idx]);
            }
            let hidden_acts = net.hidden(&batch_inputs);
            let embeddings = hidden_acts.dot(&net.w2.t());
            let exploded = embeddings.iter().any(|v| !v.is_finite())
                || embeddings.outer_iter().any(|row| !row.dot(&row).is_finite());
            if exploded {
                return Err(Error::TrainingDiverged { epoch });
            }
            let batch = FeatureBatch::new(embeddings, batch_labels)?;
            let out = cfg.loss.backward(&batch, &head)?;
            if !out.batch_mean.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += out.batch_mean * chunk.len() as f64;

            let grad_embed = out.grad_features.expect("backward pass fills gradients");
            let grad_head = out.grad_head.expect("backward pass fills gradients");

            // Backprop through embed = H W2^T and H = tanh(W1 x + b1).
            let grad_w2 = grad_embed.t().dot(&hidden_acts);
            let grad_hidden = grad_embed.dot(&net.w2);
            let grad_pre = &grad_hidden * &hidden_acts.mapv(|h| 1.0 - h * h);
            let grad_w1 = grad_pre.t().dot(&batch_inputs);
            let grad_b1 = grad_pre.sum_axis(Axis(0));

            // Momentum SGD; weight decay on the dense layers only (head
            // rows are renormalized in the loss, bias decay is skipped).
            sgd_step(&mut net.w1, &mut vel_w1, &grad_w1, lr, cfg.momentum, cfg.weight_decay);
            sgd_step(&mut net.w2, &mut vel_w2, &grad_w2, lr, cfg.momentum, cfg.weight_decay);
            vel_b1.zip_mut_with(&grad_b1, |v, g| *v = cfg.momentum * *v - lr * g);
            net.b1 += &vel_b1;
            sgd_step(head.weights_mut(), &mut vel_head, &grad_head, lr, cfg.momentum, 0.0);
        }
        let epoch_mean = epoch_loss / n_total as f64;
        if !epoch_mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        loss_history.push(epoch_mean);
    }

    let model = TrainedModel { net, head };
    let stats = magnitude_stats_from_arrays(&model, &inputs, &labels, &qualities)?;
    let report = TrainReport {
        loss_history,
        pearson_mag_cos: stats.pearson_mag_cos,
        spearman_mag_quality: stats.spearman_mag_quality,
        nearest_center_accuracy: stats.nearest_center_accuracy,
        samples: stats.samples,
        init_magnitude_scale,
    };
    Ok(TrainOutcome { model, report })
}

/// Magnitude/cosine/quality statistics of a model over a dataset.
pub fn collect_magnitude_stats(
    model: &TrainedModel,
    dataset: &[LabeledSample],
) -> Result<MagnitudeStats> {
    let (inputs, labels, qualities) = dataset_arrays(dataset)?;
    magnitude_stats_from_arrays(model, &inputs, &labels, &qualities)
}

fn magnitude_stats_from_arrays(
    model: &TrainedModel,
    inputs: &Array2<f64>,
    labels: &[usize],
    qualities: &[f64],
) -> Result<MagnitudeStats> {
    if labels.len() < 3 {
        return Err(Error::Statistics(format!(
            "need at least 3 samples for correlations, got {}",
            labels.len()
        )));
    }
    let embeddings = model.net.embed(inputs);
    let mut head_unit = model.head.weights().clone();
    for mut row in head_unit.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Domain("head row lost its positive norm".into()));
        }
        row.mapv_inplace(|v| v / norm);
    }

    let mut samples = Vec::with_capacity(labels.len());
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let e = embeddings.row(i);
        let magnitude = e.dot(&e).sqrt();
        if !(magnitude > 0.0 && magnitude.is_finite()) {
            return Err(Error::Domain(format!("embedding {i} collapsed to zero norm")));
        }
        let mut best = (f64::NEG_INFINITY, 0usize);
        let mut cos_y = 0.0;
        for (j, w) in head_unit.outer_iter().enumerate() {
            let cos = e.dot(&w) / magnitude;
            if cos > best.0 {
                best = (cos, j);
            }
            if j == label {
                cos_y = cos;
            }
        }
        if best.1 == label {
            correct += 1;
        }
        samples.push(SampleStat { label, true_quality: qualities[i], magnitude, cos_theta_y: cos_y });
    }

    let mags: Vec<f64> = samples.iter().map(|s| s.magnitude).collect();
    let coss: Vec<f64> = samples.iter().map(|s| s.cos_theta_y).collect();
    let quals: Vec<f64> = samples.iter().map(|s| s.true_quality).collect();
    Ok(MagnitudeStats {
        pearson_mag_cos: pearson(&mags, &coss),
        spearman_mag_quality: spearman(&mags, &quals),
        nearest_center_accuracy: correct as f64 / labels.len() as f64,
        samples,
    })
}

/// Pearson correlation; `None` when either side has (numerically) zero
/// variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let denom = (sxx * syy).sqrt();
    if denom <= 1e-24 {
        return None;
    }
    Some(sxy / denom)
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Writes per-sample stats as CSV with the mandatory header, rows in the
/// given (dataset) order. Reals carry 17 significant digits so the file
/// round-trips bit-exactly.
pub fn write_samples_csv<W: std::io::Write>(writer: W, samples: &[SampleStat]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["sample_id", "label", "true_quality", "magnitude", "cos_theta"])?;
    for (i, s) in samples.iter().enumerate() {
        w.write_record([
            i.to_string(),
            s.label.to_string(),
            format!("{:.16e}", s.true_quality),
            format!("{:.16e}", s.magnitude),
            format!("{:.16e}", s.cos_theta_y),
        ])?;
    }
    w.flush()?;
    Ok(())
}
