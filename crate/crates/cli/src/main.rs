//! Command-line front end: theory certification, desk-scale training, and
//! evaluation, each driven by a JSON config and writing reproducible
//! reports.
//!
//! Exit codes: 0 success (including a skipped out-of-guarantee theory run),
//! 1 runtime failure or a failed certificate, 2 unreadable or invalid
//! configuration, 3 a verification protocol without both pair kinds.
//!
//! A `--seed S` override expands into per-stage seeds with fixed offsets:
//! dataset `S+1`, training `S+2`, theory sampling `S+3`, evaluation split
//! `S+4`, k-means `S+5`.

mod config;
mod io;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use maglab::eval::clustering::{ahc, dbscan, kmeans, ClusteringReport};
use maglab::eval::{
    aggregate_magface_plus, aggregate_mean, cosine_score, error_versus_reject, tar_at_far,
    PairProtocol, QualityScores, QualitySource,
};
use maglab::theory::{
    certify_convexity, certify_endpoint_signs, certify_monotonic_in_mass,
    certify_monotonic_in_theta, lemma1_probability, sample_configs, CertificateReport,
};
use maglab::trainer::{generate_dataset, train, write_samples_csv};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::config::{
    variants, EvalCommandConfig, EvalSource, TrainCommandConfig, VerifyTheoryConfig,
};
use crate::io::EmbeddingTable;

const SEED_OFFSET_DATASET: u64 = 1;
const SEED_OFFSET_TRAIN: u64 = 2;
const SEED_OFFSET_THEORY: u64 = 3;
const SEED_OFFSET_EVAL_SPLIT: u64 = 4;
const SEED_OFFSET_KMEANS: u64 = 5;

#[derive(Parser)]
#[command(name = "maglab", about = "Magnitude-aware margin loss laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify convexity, endpoint signs, optimum monotonicity, and the
    /// angle-range probability bound for both magnitude-aware variants.
    VerifyTheory(CommonArgs),
    /// Generate a synthetic dataset and train the embedding network.
    Train(CommonArgs),
    /// Verification, quality-curve, aggregation, and clustering reports.
    Eval(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the JSON configuration document.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Global seed override, expanded per stage with fixed offsets.
    #[arg(long)]
    seed: Option<u64>,
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    fn protocol(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::VerifyTheory(args) => run_verify_theory(&args),
        Command::Train(args) => run_train(&args),
        Command::Eval(args) => run_eval(&args),
    };
    match result {
        Ok(()) => {}
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            std::process::exit(failure.code);
        }
    }
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))
}

fn ensure_out_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::runtime(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text)
        .map_err(|e| Failure::runtime(format!("writing {}: {e}", path.display())))
}

fn run_verify_theory(args: &CommonArgs) -> Result<(), Failure> {
    let mut cfg: VerifyTheoryConfig = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed + SEED_OFFSET_THEORY;
    }
    if cfg.n_configs == 0 {
        return Err(Failure::config("n_configs must be positive"));
    }
    if cfg.grid_points < 64 {
        return Err(Failure::config("grid_points must be at least 64"));
    }
    for pair in cfg.thetas.windows(2) {
        if pair[1] < pair[0] {
            return Err(Failure::config("thetas must be ascending"));
        }
    }
    let theta_limit = std::f64::consts::FRAC_PI_2 - cfg.params.u_m;
    if let Some(&bad) =
        cfg.thetas.iter().find(|&&t| !(0.0..=theta_limit.max(0.0)).contains(&t))
    {
        return Err(Failure::config(format!(
            "thetas: angle {bad} outside [0, pi/2 - u_m] = [0, {theta_limit}]"
        )));
    }
    for pair in cfg.inter_class_masses.windows(2) {
        if pair[1] < pair[0] {
            return Err(Failure::config("inter_class_masses must be ascending"));
        }
    }
    if cfg.inter_class_masses.iter().any(|&b| !(b > 0.0)) {
        return Err(Failure::config("inter_class_masses must be positive"));
    }
    for (i, case) in cfg.lemma1_cases.iter().enumerate() {
        if case.k < 1 || case.k > case.n {
            return Err(Failure::config(format!("lemma1_cases[{i}]: need 1 <= k <= n")));
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&case.m_val) {
            return Err(Failure::config(format!(
                "lemma1_cases[{i}]: m_val must lie in [0, pi/2]"
            )));
        }
    }
    ensure_out_dir(&args.out)?;

    let seeds = json!({"theory": cfg.seed, "override": args.seed});
    if !cfg.params.guarantees_hold() {
        let report = json!({
            "status": "skipped",
            "reason": format!(
                "guarantees do not hold: lambda_g = {} vs bound {}, u_m = {} vs pi/2",
                cfg.params.lambda_g,
                cfg.params.lambda_lower_bound(),
                cfg.params.u_m,
            ),
            "reports": [],
            "lemma1": [],
        });
        write_json(&args.out.join("certificates.json"), &report)?;
        io::write_meta(&args.out, "verify-theory", &cfg, &seeds)
            .map_err(|e| Failure::runtime(e.to_string()))?;
        println!("verify-theory: skipped (outside the guaranteed regime)");
        return Ok(());
    }

    let mut reports: Vec<CertificateReport> = Vec::new();
    for (i, variant) in variants().into_iter().enumerate() {
        let configs = sample_configs(&cfg.params, variant, cfg.n_configs, cfg.seed + i as u64)
            .map_err(|e| Failure::runtime(e.to_string()))?;
        reports.push(
            certify_convexity(&configs, cfg.grid_points)
                .map_err(|e| Failure::runtime(e.to_string()))?,
        );
        reports.push(
            certify_endpoint_signs(&configs).map_err(|e| Failure::runtime(e.to_string()))?,
        );
        reports.push(
            certify_monotonic_in_theta(&cfg.params, variant, &cfg.thetas, &cfg.inter_class_masses)
                .map_err(|e| Failure::runtime(e.to_string()))?,
        );
        reports.push(
            certify_monotonic_in_mass(&cfg.params, variant, &cfg.thetas, &cfg.inter_class_masses)
                .map_err(|e| Failure::runtime(e.to_string()))?,
        );
    }

    let mut lemma1_entries = Vec::new();
    let mut lemma1_all_pass = true;
    for case in &cfg.lemma1_cases {
        let probability = lemma1_probability(case.n, case.k, case.m_val)
            .map_err(|e| Failure::runtime(e.to_string()))?;
        let pass = probability >= case.min_probability;
        lemma1_all_pass &= pass;
        lemma1_entries.push(json!({
            "n": case.n,
            "k": case.k,
            "m_val": case.m_val,
            "probability": probability,
            "min_probability": case.min_probability,
            "pass": pass,
        }));
    }

    let all_passed = reports.iter().all(|r| r.passed()) && lemma1_all_pass;
    for r in &reports {
        println!(
            "verify-theory: {} [{}] {} ({} configs, worst margin {:.3e})",
            r.property,
            r.variant,
            if r.passed() { "pass" } else { "FAIL" },
            r.configs_tested,
            r.worst_margin,
        );
    }
    let report = json!({
        "status": "completed",
        "all_passed": all_passed,
        "reports": reports,
        "lemma1": lemma1_entries,
    });
    write_json(&args.out.join("certificates.json"), &report)?;
    io::write_meta(&args.out, "verify-theory", &cfg, &seeds)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    if all_passed {
        Ok(())
    } else {
        Err(Failure::runtime("at least one certificate failed; see certificates.json"))
    }
}

fn run_train(args: &CommonArgs) -> Result<(), Failure> {
    let mut cfg: TrainCommandConfig = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.synthetic.seed = seed + SEED_OFFSET_DATASET;
        cfg.train.seed = seed + SEED_OFFSET_TRAIN;
    }
    cfg.synthetic.validate().map_err(|e| Failure::config(format!("synthetic: {e}")))?;
    cfg.train.validate().map_err(|e| Failure::config(format!("train: {e}")))?;
    ensure_out_dir(&args.out)?;

    let dataset =
        generate_dataset(&cfg.synthetic).map_err(|e| Failure::runtime(e.to_string()))?;
    let outcome = train(&dataset, cfg.synthetic.dim_embed, &cfg.train)
        .map_err(|e| Failure::runtime(e.to_string()))?;

    write_json(&args.out.join("report.json"), &outcome.report)?;
    let samples_file = fs::File::create(args.out.join("samples.csv"))
        .map_err(|e| Failure::runtime(e.to_string()))?;
    write_samples_csv(samples_file, &outcome.report.samples)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    io::save_model(&args.out, &outcome.model).map_err(|e| Failure::runtime(e.to_string()))?;
    let seeds = json!({
        "dataset": cfg.synthetic.seed,
        "train": cfg.train.seed,
        "override": args.seed,
    });
    io::write_meta(&args.out, "train", &cfg, &seeds)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    println!(
        "train: {} epochs, final loss {:.6}, nearest-center accuracy {:.3}",
        outcome.report.loss_history.len(),
        outcome.report.loss_history.last().unwrap(),
        outcome.report.nearest_center_accuracy,
    );
    Ok(())
}

fn build_table(
    cfg: &EvalCommandConfig,
    out: &Path,
) -> Result<(EmbeddingTable, QualitySource), Failure> {
    match &cfg.source {
        EvalSource::EmbeddingsCsv { path } => {
            let table = io::read_embeddings_csv(Path::new(path))
                .map_err(|e| Failure::config(format!("source.embeddings_csv: {e}")))?;
            Ok((table, QualitySource::External))
        }
        EvalSource::Model { dir, synthetic } => {
            synthetic
                .validate()
                .map_err(|e| Failure::config(format!("source.synthetic: {e}")))?;
            let model = io::load_model(Path::new(dir))
                .map_err(|e| Failure::config(format!("source.dir: {e}")))?;
            let dataset =
                generate_dataset(synthetic).map_err(|e| Failure::runtime(e.to_string()))?;
            let mut inputs = Array2::<f64>::zeros((dataset.len(), synthetic.dim_input));
            for (i, s) in dataset.iter().enumerate() {
                for (k, &v) in s.input.iter().enumerate() {
                    inputs[[i, k]] = v;
                }
            }
            let values = model.net.embed(&inputs);
            let qualities: Vec<f64> = values.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
            let labels: Vec<usize> = dataset.iter().map(|s| s.label).collect();
            let table = EmbeddingTable { values, labels, qualities };
            io::write_embeddings_csv(&out.join("embeddings.csv"), &table)
                .map_err(|e| Failure::runtime(e.to_string()))?;
            Ok((table, QualitySource::Magnitude))
        }
    }
}

fn run_eval(args: &CommonArgs) -> Result<(), Failure> {
    let mut cfg: EvalCommandConfig = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        if let EvalSource::Model { synthetic, .. } = &mut cfg.source {
            synthetic.seed = seed + SEED_OFFSET_EVAL_SPLIT;
        }
        if let Some(clustering) = &mut cfg.clustering {
            clustering.kmeans_seed = seed + SEED_OFFSET_KMEANS;
        }
    }
    if cfg.pair_stride == 0 {
        return Err(Failure::config("pair_stride must be positive"));
    }
    if !(cfg.fmr_target > 0.0 && cfg.fmr_target <= 1.0) {
        return Err(Failure::config("fmr_target must lie in (0, 1]"));
    }
    if cfg.far_targets.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Failure::config("far_targets must lie in (0, 1]"));
    }
    ensure_out_dir(&args.out)?;

    let (table, quality_source) = build_table(&cfg, &args.out)?;
    let n = table.values.nrows();

    // Deterministic pair protocol over the embedding table.
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if (7 * i + j) % cfg.pair_stride == 0 {
                pairs.push((i, j, table.labels[i] == table.labels[j]));
            }
        }
    }
    let n_genuine = pairs.iter().filter(|p| p.2).count();
    let n_impostor = pairs.len() - n_genuine;
    if n_impostor == 0 {
        return Err(Failure::protocol(
            "the pair protocol has no impostor pairs; threshold metrics are undefined",
        ));
    }
    if n_genuine == 0 {
        return Err(Failure::protocol(
            "the pair protocol has no genuine pairs; threshold metrics are undefined",
        ));
    }
    let protocol = PairProtocol { pairs };

    // Verification table.
    let mut genuine_scores = Vec::with_capacity(n_genuine);
    let mut impostor_scores = Vec::with_capacity(n_impostor);
    for &(a, b, is_genuine) in &protocol.pairs {
        let score = cosine_score(
            table.values.row(a).as_slice().expect("contiguous row"),
            table.values.row(b).as_slice().expect("contiguous row"),
        )
        .map_err(|e| Failure::runtime(e.to_string()))?;
        if is_genuine {
            genuine_scores.push(score);
        } else {
            impostor_scores.push(score);
        }
    }
    let mut tars = Vec::new();
    for &target in &cfg.far_targets {
        let tar = tar_at_far(&genuine_scores, &impostor_scores, target)
            .map_err(|e| Failure::runtime(e.to_string()))?;
        tars.push(json!({"far_target": target, "tar": tar}));
        println!("eval: TAR@FAR={target} -> {tar:.4}");
    }
    write_json(
        &args.out.join("verification.json"),
        &json!({
            "n_genuine": n_genuine,
            "n_impostor": n_impostor,
            "tar_at_far": tars,
        }),
    )?;

    // Error-versus-reject with the table's quality scores.
    let qualities = QualityScores { values: table.qualities.clone(), source: quality_source };
    let curve = error_versus_reject(
        &protocol,
        &table.values,
        &qualities,
        &cfg.reject_fractions,
        cfg.fmr_target,
    )
    .map_err(|e| Failure::runtime(e.to_string()))?;
    let curve_file = fs::File::create(args.out.join("reject_curve.csv"))
        .map_err(|e| Failure::runtime(e.to_string()))?;
    curve.write_csv(curve_file).map_err(|e| Failure::runtime(e.to_string()))?;

    if cfg.constant_quality_control {
        let constant = QualityScores { values: vec![1.0; n], source: QualitySource::External };
        let control = error_versus_reject(
            &protocol,
            &table.values,
            &constant,
            &cfg.reject_fractions,
            cfg.fmr_target,
        )
        .map_err(|e| Failure::runtime(e.to_string()))?;
        let control_file = fs::File::create(args.out.join("reject_curve_control.csv"))
            .map_err(|e| Failure::runtime(e.to_string()))?;
        control.write_csv(control_file).map_err(|e| Failure::runtime(e.to_string()))?;
    }

    // Aggregation comparison over per-label templates.
    if let Some(agg) = &cfg.aggregation {
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &label) in table.labels.iter().enumerate() {
            by_label.entry(label).or_default().push(i);
        }
        let rows: Vec<Vec<usize>> = by_label.into_values().filter(|v| v.len() >= 2).collect();
        if rows.len() < 2 {
            return Err(Failure::runtime(
                "aggregation needs at least two identities with two samples each",
            ));
        }
        let feature = |i: usize| table.values.row(i).to_vec();
        let mut enroll_mean = Vec::new();
        let mut enroll_plus = Vec::new();
        let mut probe_mean = Vec::new();
        let mut probe_plus = Vec::new();
        for members in &rows {
            let half = members.len() / 2;
            let enroll: Vec<Vec<f64>> = members[..half].iter().map(|&i| feature(i)).collect();
            let probe: Vec<Vec<f64>> = members[half..].iter().map(|&i| feature(i)).collect();
            enroll_mean
                .push(aggregate_mean(&enroll).map_err(|e| Failure::runtime(e.to_string()))?);
            enroll_plus.push(
                aggregate_magface_plus(&enroll).map_err(|e| Failure::runtime(e.to_string()))?,
            );
            probe_mean
                .push(aggregate_mean(&probe).map_err(|e| Failure::runtime(e.to_string()))?);
            probe_plus.push(
                aggregate_magface_plus(&probe).map_err(|e| Failure::runtime(e.to_string()))?,
            );
        }
        let score_all = |enroll: &[Vec<f64>],
                         probe: &[Vec<f64>]|
         -> Result<(Vec<f64>, Vec<f64>), Failure> {
            let mut genuine = Vec::new();
            let mut impostor = Vec::new();
            for i in 0..enroll.len() {
                for j in 0..probe.len() {
                    let s = cosine_score(&enroll[i], &probe[j])
                        .map_err(|e| Failure::runtime(e.to_string()))?;
                    if i == j {
                        genuine.push(s);
                    } else {
                        impostor.push(s);
                    }
                }
            }
            Ok((genuine, impostor))
        };
        let (g_mean, i_mean) = score_all(&enroll_mean, &probe_mean)?;
        let (g_plus, i_plus) = score_all(&enroll_plus, &probe_plus)?;
        let tar_mean = tar_at_far(&g_mean, &i_mean, agg.far_target)
            .map_err(|e| Failure::runtime(e.to_string()))?;
        let tar_plus = tar_at_far(&g_plus, &i_plus, agg.far_target)
            .map_err(|e| Failure::runtime(e.to_string()))?;
        println!(
            "eval: aggregation TAR@FAR={} mean={tar_mean:.4} magnitude-weighted={tar_plus:.4}",
            agg.far_target
        );
        write_json(
            &args.out.join("aggregation.json"),
            &json!({
                "far_target": agg.far_target,
                "n_identities": rows.len(),
                "tar_mean": tar_mean,
                "tar_magface_plus": tar_plus,
            }),
        )?;
    }

    // Clustering scored against the labels.
    if let Some(clu) = &cfg.clustering {
        let truth: Vec<i32> = table.labels.iter().map(|&l| l as i32).collect();
        let mut distinct = truth.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let k = clu.k.unwrap_or(distinct.len());
        let mut reports = Vec::new();
        let km = kmeans(&table.values, k, clu.kmeans_seed)
            .map_err(|e| Failure::runtime(e.to_string()))?;
        reports.push(
            ClusteringReport::from_scores(
                "kmeans",
                json!({"k": k, "seed": clu.kmeans_seed}),
                &km.result.assignment,
                &truth,
            )
            .map_err(|e| Failure::runtime(e.to_string()))?,
        );
        let hierarchical = ahc(&table.values, k).map_err(|e| Failure::runtime(e.to_string()))?;
        reports.push(
            ClusteringReport::from_scores("ahc", json!({"k": k}), &hierarchical.assignment, &truth)
                .map_err(|e| Failure::runtime(e.to_string()))?,
        );
        let density = dbscan(&table.values, clu.dbscan_eps, clu.dbscan_min_pts)
            .map_err(|e| Failure::runtime(e.to_string()))?;
        reports.push(
            ClusteringReport::from_scores(
                "dbscan",
                json!({"eps": clu.dbscan_eps, "min_pts": clu.dbscan_min_pts}),
                &density.assignment,
                &truth,
            )
            .map_err(|e| Failure::runtime(e.to_string()))?,
        );
        for r in &reports {
            println!("eval: clustering {} nmi={:.4} bcubed_f={:.4}", r.method, r.nmi, r.bcubed_f);
        }
        write_json(&args.out.join("clustering.json"), &reports)?;
    }

    let seeds = json!({"override": args.seed});
    io::write_meta(&args.out, "eval", &cfg, &seeds)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    Ok(())
}
