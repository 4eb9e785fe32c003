//! Configuration documents for the three subcommands.

use maglab::theory::LossVariant;
use maglab::trainer::{SyntheticSpec, TrainConfig};
use maglab::MagParams;
use serde::{Deserialize, Serialize};

/// One angle-range probability case with its acceptance threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lemma1Case {
    pub n: u64,
    pub k: u64,
    pub m_val: f64,
    pub min_probability: f64,
}

fn default_n_configs() -> usize {
    200
}

fn default_grid_points() -> usize {
    512
}

fn default_thetas() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7]
}

fn default_masses() -> Vec<f64> {
    vec![1.0, 10.0, 100.0, 1000.0]
}

fn default_lemma1_cases() -> Vec<Lemma1Case> {
    vec![
        Lemma1Case { n: 85_000, k: 1, m_val: 0.5, min_probability: 1.0 - 1e-10 },
        Lemma1Case { n: 2, k: 1, m_val: 0.0, min_probability: 0.75 - 1e-15 },
    ]
}

fn default_theory_seed() -> u64 {
    7
}

/// `verify-theory` input document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyTheoryConfig {
    pub params: MagParams,
    #[serde(default = "default_n_configs")]
    pub n_configs: usize,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Ascending angles for the angle-monotonicity suite (also the base
    /// angles of the mass suite).
    #[serde(default = "default_thetas")]
    pub thetas: Vec<f64>,
    /// Ascending inter-class masses for the mass-monotonicity suite (also
    /// the base masses of the angle suite).
    #[serde(default = "default_masses")]
    pub inter_class_masses: Vec<f64>,
    #[serde(default = "default_lemma1_cases")]
    pub lemma1_cases: Vec<Lemma1Case>,
    #[serde(default = "default_theory_seed")]
    pub seed: u64,
}

pub fn variants() -> [LossVariant; 2] {
    [LossVariant::MagFace, LossVariant::MagCosFace]
}

/// `train` input document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
}

/// Where `eval` gets its embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum EvalSource {
    /// Path to an embeddings CSV (`id,label,quality,f0,...`).
    EmbeddingsCsv { path: String },
    /// A trained model directory (`model.bin` + `model.json`) embedding a
    /// freshly generated synthetic split; quality is the feature magnitude.
    Model { dir: String, synthetic: SyntheticSpec },
}

fn default_far_targets() -> Vec<f64> {
    vec![0.1, 0.01]
}

fn default_fmr_target() -> f64 {
    0.01
}

fn default_reject_fractions() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3]
}

fn default_pair_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Aggregation comparison settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    #[serde(default = "default_fmr_target")]
    pub far_target: f64,
}

fn default_dbscan_eps() -> f64 {
    0.3
}

fn default_dbscan_min_pts() -> usize {
    5
}

fn default_kmeans_seed() -> u64 {
    11
}

/// Clustering evaluation settings; `k` defaults to the number of distinct
/// labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_dbscan_eps")]
    pub dbscan_eps: f64,
    #[serde(default = "default_dbscan_min_pts")]
    pub dbscan_min_pts: usize,
    #[serde(default = "default_kmeans_seed")]
    pub kmeans_seed: u64,
}

/// `eval` input document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCommandConfig {
    pub source: EvalSource,
    #[serde(default = "default_far_targets")]
    pub far_targets: Vec<f64>,
    #[serde(default = "default_fmr_target")]
    pub fmr_target: f64,
    #[serde(default = "default_reject_fractions")]
    pub reject_fractions: Vec<f64>,
    /// Pair (i, j) enters the protocol iff `(7 i + j) % pair_stride == 0`;
    /// 1 keeps every pair.
    #[serde(default = "default_pair_stride")]
    pub pair_stride: usize,
    /// Also emit the constant-quality control curve.
    #[serde(default = "default_true")]
    pub constant_quality_control: bool,
    #[serde(default)]
    pub aggregation: Option<AggregationConfig>,
    #[serde(default)]
    pub clustering: Option<ClusteringConfig>,
}
