//! Acceptance suite: one test per criterion, each printing a pass line with
//! its runtime (visible under `--nocapture`). Criteria 8 and 9 share one
//! pair of desk-scale training runs through a lazily initialized fixture.

use std::sync::OnceLock;
use std::time::Instant;

use maglab::eval::clustering::{bcubed_f, nmi};
use maglab::eval::{
    aggregate_magface_plus, aggregate_mean, cosine_score, error_versus_reject, fnmr_at_fmr,
    tar_at_far, PairProtocol, QualityScores, QualitySource,
};
use maglab::loss::{
    arcface_backward, arcface_forward, cosface_backward, cosface_forward, magcosface_backward,
    magcosface_forward, magface_backward, magface_forward, finite_diff_grad,
    max_relative_grad_error, ClassHead, FeatureBatch, LossBreakdown,
};
use maglab::theory::{
    lemma1_probability, monotonic_in_mass, monotonic_in_theta, optimal_magnitude, sample_configs,
    scalar_loss, convexity_certificate, LossVariant, ScalarLossConfig,
};
use maglab::trainer::{
    generate_dataset, train, LearningRateSchedule, LossSpec, SyntheticSpec, TrainConfig,
    TrainOutcome,
};
use maglab::{MagParams, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

fn reference_params() -> MagParams {
    MagParams::new(64.0, 10.0, 110.0, 0.4, 0.8, 35.0).unwrap()
}

fn pass(criterion: &str, started: Instant) {
    println!("acceptance {criterion}: PASS ({:.2?})", started.elapsed());
}

/// Random batch/head with unit directions scaled into a magnitude range.
fn random_instance(
    rng: &mut ChaCha12Rng,
    n_samples: usize,
    dim: usize,
    n_classes: usize,
    lo_mag: f64,
    hi_mag: f64,
) -> (FeatureBatch, ClassHead) {
    let mut values = Array2::<f64>::zeros((n_samples, dim));
    for mut row in values.outer_iter_mut() {
        loop {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-3 {
                let target: f64 = rng.random_range(lo_mag..hi_mag);
                row.mapv_inplace(|v| v / norm * target);
                break;
            }
        }
    }
    let labels = (0..n_samples).map(|_| rng.random_range(0..n_classes)).collect();
    // Head rows get norms of order one: the loss renormalizes them, but the
    // weight-space curvature grows like 1/norm^2, and the finite-difference
    // oracle needs it bounded.
    let mut weights = Array2::<f64>::zeros((n_classes, dim));
    for mut row in weights.outer_iter_mut() {
        loop {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-3 {
                let target: f64 = rng.random_range(0.5..2.0);
                row.mapv_inplace(|v| v / norm * target);
                break;
            }
        }
    }
    (FeatureBatch::new(values, labels).unwrap(), ClassHead::new(weights).unwrap())
}

#[test]
fn criterion_01_regularizer_weight_bound() {
    let started = Instant::now();
    let p = reference_params();
    let closed = p.lambda_lower_bound();
    let generic = p.s * p.slope() / (-p.regularizer_deriv(p.l_a).unwrap());
    assert!(
        (closed - generic).abs() <= 1e-9 * generic.abs(),
        "closed form {closed} vs generic route {generic}"
    );
    assert!((closed - 25.8133).abs() < 1e-3, "bound {closed} drifted from 25.8133");
    assert!((closed - 25.813333333333333).abs() < 1e-9);
    assert!(p.lambda_g >= closed, "default weight 35 must clear the bound");
    pass("criterion 01 (regularizer weight lower bound)", started);
}

#[test]
fn criterion_02_reduction_identities() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(1002);
    // Magnitudes all above u_a pin the margin at u_m; lambda_g = 0 removes
    // the regularizer. The magnitude-aware losses must equal their
    // fixed-margin counterparts.
    for _ in 0..1000 {
        let n_samples = rng.random_range(1..=6);
        let dim = rng.random_range(2..=8);
        let n_classes = rng.random_range(2..=6);
        let (batch, head) = random_instance(&mut rng, n_samples, dim, n_classes, 5.0, 50.0);
        let margin = rng.random_range(0.05..0.9);
        let scale = rng.random_range(8.0..64.0);
        let p = MagParams::new(scale, 1e-9, 1e-6, 0.5 * margin, margin, 0.0).unwrap();

        let mag = magface_forward(&batch, &head, &p).unwrap();
        let arc = arcface_forward(&batch, &head, scale, margin).unwrap();
        assert!((mag.batch_mean - arc.batch_mean).abs() < 1e-12);
        for (a, b) in mag.samples.iter().zip(arc.samples.iter()) {
            assert!((a.loss - b.loss).abs() < 1e-12);
        }

        let magcos = magcosface_forward(&batch, &head, &p).unwrap();
        let cos = cosface_forward(&batch, &head, scale, margin).unwrap();
        assert!((magcos.batch_mean - cos.batch_mean).abs() < 1e-12);
        for (a, b) in magcos.samples.iter().zip(cos.samples.iter()) {
            assert!((a.loss - b.loss).abs() < 1e-12);
        }
    }
    pass("criterion 02 (reduction identities, 1000 instances)", started);
}

/// Instance whose target cosines keep clear of the two spots where central
/// differences stop being a valid oracle: the clamp saturation near |cos|=1
/// and the angular fallback switch at cos = -cos(margin).
fn random_smooth_instance(
    rng: &mut ChaCha12Rng,
    n_samples: usize,
    dim: usize,
    n_classes: usize,
    margin_of: &dyn Fn(f64) -> f64,
) -> (FeatureBatch, ClassHead) {
    loop {
        let (batch, head) = random_instance(rng, n_samples, dim, n_classes, 12.0, 108.0);
        let cos = maglab::loss::cosine_logits(&batch, &head).unwrap();
        let magnitudes = batch.magnitudes();
        let smooth = batch.labels().iter().enumerate().all(|(i, &y)| {
            let c = cos[[i, y]];
            let boundary = -margin_of(magnitudes[i]).cos();
            c.abs() <= 0.99 && (c - boundary).abs() > 5e-3
        });
        if smooth {
            return (batch, head);
        }
    }
}

fn gradient_fidelity<F, G>(
    name: &str,
    forward: F,
    backward: G,
    margin_of: &dyn Fn(f64) -> f64,
    seed: u64,
) where
    F: Fn(&FeatureBatch, &ClassHead) -> Result<f64>,
    G: Fn(&FeatureBatch, &ClassHead) -> Result<LossBreakdown>,
{
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n_samples = rng.random_range(1..=8);
        let dim = rng.random_range(2..=16);
        let n_classes = rng.random_range(2..=10);
        let (batch, head) =
            random_smooth_instance(&mut rng, n_samples, dim, n_classes, margin_of);
        let out = backward(&batch, &head).unwrap();
        let (fd_f, fd_w) = finite_diff_grad(&forward, &batch, &head, 1e-4).unwrap();
        worst = worst
            .max(max_relative_grad_error(out.grad_features.as_ref().unwrap(), &fd_f))
            .max(max_relative_grad_error(out.grad_head.as_ref().unwrap(), &fd_w));
    }
    assert!(worst < 1e-5, "{name}: worst relative gradient error {worst}");
}

#[test]
fn criterion_03_gradient_fidelity_all_variants() {
    let started = Instant::now();
    let p = reference_params();
    gradient_fidelity(
        "magnitude-aware angular",
        |b, h| magface_forward(b, h, &p).map(|o| o.batch_mean),
        |b, h| magface_backward(b, h, &p),
        &|a| p.margin(a),
        1031,
    );
    gradient_fidelity(
        "magnitude-aware cosine",
        |b, h| magcosface_forward(b, h, &p).map(|o| o.batch_mean),
        |b, h| magcosface_backward(b, h, &p),
        &|a| p.margin(a),
        1032,
    );
    gradient_fidelity(
        "fixed angular",
        |b, h| arcface_forward(b, h, 64.0, 0.5).map(|o| o.batch_mean),
        |b, h| arcface_backward(b, h, 64.0, 0.5),
        &|_| 0.5,
        1033,
    );
    gradient_fidelity(
        "fixed cosine",
        |b, h| cosface_forward(b, h, 64.0, 0.35).map(|o| o.batch_mean),
        |b, h| cosface_backward(b, h, 64.0, 0.35),
        &|_| 0.35,
        1034,
    );
    pass("criterion 03 (gradient fidelity, 4 x 100 instances)", started);
}

#[test]
fn criterion_04_scalar_loss_convexity() {
    let started = Instant::now();
    for (variant, seed) in [(LossVariant::MagFace, 1041u64), (LossVariant::MagCosFace, 1042)] {
        let configs = sample_configs(&reference_params(), variant, 200, seed).unwrap();
        for cfg in &configs {
            let outcome = convexity_certificate(cfg, 512).unwrap();
            assert!(
                outcome.pass,
                "{variant}: second difference {} at a = {} (theta {}, mass {})",
                outcome.worst_second_difference,
                outcome.worst_at,
                cfg.theta_y,
                cfg.inter_class_mass
            );
        }
    }
    pass("criterion 04 (strict convexity, 2 x 200 configs)", started);
}

/// Brute-force argmin over an equally spaced grid: the search oracle.
fn grid_argmin(cfg: &ScalarLossConfig, points: usize) -> f64 {
    let p = &cfg.params;
    let mut best = (f64::INFINITY, p.l_a);
    for i in 0..points {
        let a = p.l_a + (p.u_a - p.l_a) * i as f64 / (points - 1) as f64;
        let v = scalar_loss(a, cfg).unwrap();
        if v < best.0 {
            best = (v, a);
        }
    }
    best.1
}

#[test]
fn criterion_05_unique_optimum() {
    let started = Instant::now();
    let p = reference_params();
    let tol = 2.0 * (p.u_a - p.l_a) / 1e5;
    for (variant, seed) in [(LossVariant::MagFace, 1051u64), (LossVariant::MagCosFace, 1052)] {
        let configs = sample_configs(&p, variant, 200, seed).unwrap();
        for cfg in &configs {
            let report = optimal_magnitude(cfg).unwrap();
            assert!(
                report.deriv_at_la < 0.0 && report.deriv_at_ua > 0.0,
                "{variant}: endpoint derivatives {} / {}",
                report.deriv_at_la,
                report.deriv_at_ua
            );
            let oracle = grid_argmin(cfg, 100_000);
            assert!(
                (report.a_star - oracle).abs() <= tol,
                "{variant}: search {} vs grid {} (theta {}, mass {})",
                report.a_star,
                oracle,
                cfg.theta_y,
                cfg.inter_class_mass
            );
        }
    }
    pass("criterion 05 (endpoint signs + unique optimum, 2 x 200 configs)", started);
}

#[test]
fn criterion_06_optimum_monotonicity() {
    let started = Instant::now();
    for variant in [LossVariant::MagFace, LossVariant::MagCosFace] {
        let theta_base =
            ScalarLossConfig::new(0.0, 100.0, reference_params(), variant).unwrap();
        let by_theta = monotonic_in_theta(&theta_base, &[0.1, 0.3, 0.5, 0.7]).unwrap();
        assert!(
            by_theta.pass,
            "{variant}: optima by angle {:?} (worst rise {})",
            by_theta.a_stars, by_theta.worst_violation
        );
        let mass_base = ScalarLossConfig::new(0.5, 1.0, reference_params(), variant).unwrap();
        let by_mass = monotonic_in_mass(&mass_base, &[1.0, 10.0, 100.0, 1000.0]).unwrap();
        assert!(
            by_mass.pass,
            "{variant}: optima by mass {:?} (worst rise {})",
            by_mass.a_stars, by_mass.worst_violation
        );
    }
    pass("criterion 06 (optimum monotone in angle and inter-class mass)", started);
}

#[test]
fn criterion_07_angle_range_probability() {
    let started = Instant::now();
    let large = lemma1_probability(85_000, 1, 0.5).unwrap();
    assert!(large >= 1.0 - 1e-10, "large-population probability {large}");
    let small = lemma1_probability(2, 1, 0.0).unwrap();
    assert!((small - 0.75).abs() < 1e-15, "two-class zero-margin probability {small}");
    pass("criterion 07 (angle-range probability bound)", started);
}

/// Desk-scale experiment shared by criteria 8 and 9: one dataset, a
/// magnitude-aware run and a softmax run from the identical initialization.
struct DeskScaleRuns {
    spec: SyntheticSpec,
    magface: TrainOutcome,
    softmax: TrainOutcome,
}

static DESK_RUNS: OnceLock<DeskScaleRuns> = OnceLock::new();

fn desk_scale_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_classes: 8,
        dim_input: 16,
        dim_embed: 8,
        samples_per_class: 200,
        quality_noise_max: 0.8,
        seed: 424242,
    }
}

fn desk_scale_config(loss: LossSpec) -> TrainConfig {
    TrainConfig {
        loss,
        epochs: 40,
        batch_size: 64,
        learning_rate: LearningRateSchedule {
            initial: 0.1,
            decay_epochs: vec![30],
            decay_factor: 0.1,
        },
        momentum: 0.9,
        weight_decay: 5e-4,
        seed: 3737,
        hidden_width: 64,
        init_magnitude: Some(60.0),
    }
}

fn desk_runs() -> &'static DeskScaleRuns {
    DESK_RUNS.get_or_init(|| {
        let spec = desk_scale_spec();
        let data = generate_dataset(&spec).unwrap();
        let magface = train(
            &data,
            spec.dim_embed,
            &desk_scale_config(LossSpec::MagFace { params: reference_params() }),
        )
        .unwrap();
        let softmax =
            train(&data, spec.dim_embed, &desk_scale_config(LossSpec::Softmax { s: 64.0 }))
                .unwrap();
        DeskScaleRuns { spec, magface, softmax }
    })
}

#[test]
fn criterion_08_magnitude_quality_ordering() {
    let started = Instant::now();
    let runs = desk_runs();
    let mag_pearson = runs.magface.report.pearson_mag_cos.expect("non-degenerate magnitudes");
    let soft_pearson = runs.softmax.report.pearson_mag_cos.expect("non-degenerate magnitudes");
    assert!(
        mag_pearson >= soft_pearson + 0.3,
        "pearson gap too small: magnitude-aware {mag_pearson} vs softmax {soft_pearson}"
    );
    let spearman = runs.magface.report.spearman_mag_quality.expect("non-degenerate qualities");
    assert!(spearman > 0.0, "magnitude/quality rank correlation {spearman}");
    // Both runs must have actually trained.
    for report in [&runs.magface.report, &runs.softmax.report] {
        assert!(report.loss_history.last().unwrap() < report.loss_history.first().unwrap());
    }
    pass("criterion 08 (magnitude-quality ordering at desk scale)", started);
}

#[test]
fn criterion_09_quality_reject_curve() {
    let started = Instant::now();
    let runs = desk_runs();
    // Fresh noisy split embedded by the trained magnitude-aware model.
    let test_spec = SyntheticSpec { seed: 515151, ..runs.spec.clone() };
    let test_data = generate_dataset(&test_spec).unwrap();
    let mut inputs = Array2::<f64>::zeros((test_data.len(), test_spec.dim_input));
    for (i, s) in test_data.iter().enumerate() {
        for (k, &v) in s.input.iter().enumerate() {
            inputs[[i, k]] = v;
        }
    }
    let embeddings = runs.magface.model.net.embed(&inputs);
    let magnitudes: Vec<f64> = embeddings.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut pairs = Vec::new();
    for i in 0..test_data.len() {
        for j in (i + 1)..test_data.len() {
            if (7 * i + j) % 5 == 0 {
                pairs.push((i, j, test_data[i].label == test_data[j].label));
            }
        }
    }
    let protocol = PairProtocol { pairs };
    let fractions = [0.0, 0.1, 0.2, 0.3];

    let qualities = QualityScores { values: magnitudes, source: QualitySource::Magnitude };
    let curve =
        error_versus_reject(&protocol, &embeddings, &qualities, &fractions, 0.01).unwrap();
    assert!(curve.valid.iter().all(|&v| v), "every point must be valid");
    assert!(
        curve.fnmr_values[3] < curve.fnmr_values[0],
        "FNMR at 30% rejection ({}) must fall strictly below the base ({})",
        curve.fnmr_values[3],
        curve.fnmr_values[0]
    );

    let constant = QualityScores {
        values: vec![1.0; embeddings.nrows()],
        source: QualitySource::External,
    };
    let control =
        error_versus_reject(&protocol, &embeddings, &constant, &fractions, 0.01).unwrap();
    for (i, &v) in control.fnmr_values.iter().enumerate() {
        assert!(control.valid[i], "control point {i} must be valid");
        assert_eq!(v, control.fnmr_values[0], "control curve must be flat at point {i}");
    }
    pass("criterion 09 (magnitude-as-quality reject curve)", started);
}

#[test]
fn criterion_10_magnitude_weighted_aggregation() {
    let started = Instant::now();
    // Seeded multi-sample identities: direction noise and magnitude both
    // track the drawn quality, so low-quality samples carry small
    // magnitudes.
    let mut rng = ChaCha12Rng::seed_from_u64(777);
    let dim = 8;
    let n_ids = 24;
    let per_side = 4;
    let (l_a, u_a, noise) = (10.0, 110.0, 1.2);
    let mut enroll_mean = Vec::new();
    let mut enroll_plus = Vec::new();
    let mut probe_mean = Vec::new();
    let mut probe_plus = Vec::new();
    for _ in 0..n_ids {
        let proto: Vec<f64> = {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        };
        let make_side = |rng: &mut ChaCha12Rng| -> Vec<Vec<f64>> {
            (0..per_side)
                .map(|_| {
                    let q: f64 = rng.random_range(0.0..1.0);
                    let tangent: Vec<f64> = {
                        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                        let along: f64 = g.iter().zip(&proto).map(|(a, b)| a * b).sum();
                        let raw: Vec<f64> =
                            g.iter().zip(&proto).map(|(a, b)| a - along * b).collect();
                        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                        raw.into_iter().map(|x| x / n).collect()
                    };
                    let angle = (1.0 - q) * noise;
                    let magnitude = l_a + q * (u_a - l_a);
                    proto
                        .iter()
                        .zip(&tangent)
                        .map(|(p, t)| (angle.cos() * p + angle.sin() * t) * magnitude)
                        .collect()
                })
                .collect()
        };
        let enroll = make_side(&mut rng);
        let probe = make_side(&mut rng);
        enroll_mean.push(aggregate_mean(&enroll).unwrap());
        enroll_plus.push(aggregate_magface_plus(&enroll).unwrap());
        probe_mean.push(aggregate_mean(&probe).unwrap());
        probe_plus.push(aggregate_magface_plus(&probe).unwrap());
    }
    let score_all = |enroll: &[Vec<f64>], probe: &[Vec<f64>]| {
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for i in 0..n_ids {
            for j in 0..n_ids {
                let s = cosine_score(&enroll[i], &probe[j]).unwrap();
                if i == j {
                    genuine.push(s);
                } else {
                    impostor.push(s);
                }
            }
        }
        (genuine, impostor)
    };
    let (g_mean, i_mean) = score_all(&enroll_mean, &probe_mean);
    let (g_plus, i_plus) = score_all(&enroll_plus, &probe_plus);
    let tar_mean = tar_at_far(&g_mean, &i_mean, 0.01).unwrap();
    let tar_plus = tar_at_far(&g_plus, &i_plus, 0.01).unwrap();
    assert!(
        tar_plus >= tar_mean,
        "magnitude-weighted aggregation ({tar_plus}) must not trail the mean ({tar_mean})"
    );
    pass("criterion 10 (magnitude-weighted aggregation ordering)", started);
}

#[test]
fn criterion_11_metric_units() {
    let started = Instant::now();
    // BCubed: one cluster over two 2-member classes.
    let (precision, recall, f) = bcubed_f(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
    assert_eq!(precision, 0.5);
    assert_eq!(recall, 1.0);
    assert!((f - 2.0 / 3.0).abs() < 1e-15);
    // NMI: identity and relabeled partitions score exactly 1.
    let base = [0, 0, 1, 1, 2, 2];
    assert_eq!(nmi(&base, &base).unwrap(), 1.0);
    assert!((nmi(&base, &[4, 4, 9, 9, 1, 1]).unwrap() - 1.0).abs() < 1e-12);
    assert!((nmi(&[7, 7, 3, 3, 0, 0], &base).unwrap() - 1.0).abs() < 1e-12);
    // Threshold sweep fixture.
    let (threshold, fnmr) =
        fnmr_at_fmr(&[0.9, 0.8, 0.3], &[0.5, 0.2, 0.1, 0.05], 0.25).unwrap();
    assert_eq!(threshold, 0.5);
    assert!((fnmr - 1.0 / 3.0).abs() < 1e-15);
    pass("criterion 11 (metric unit fixtures)", started);
}
