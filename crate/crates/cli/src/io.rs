//! File formats: the model binary with its JSON sidecar, the embeddings
//! CSV, and run metadata.
//!
//! All reals serialize with 17 significant decimal digits, enough for f64
//! round trips to be bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use maglab::loss::ClassHead;
use maglab::trainer::{EmbeddingNet, TrainedModel};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Shape sidecar for `model.bin`: a flat little-endian f64 array holding,
/// in order, `w1` (row-major), `b1`, `w2` (row-major), and the class head
/// rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub dim_input: usize,
    pub hidden: usize,
    pub dim_embed: usize,
    pub n_classes: usize,
    pub layout: Vec<String>,
}

impl ModelSidecar {
    fn expected_len(&self) -> usize {
        self.hidden * self.dim_input
            + self.hidden
            + self.dim_embed * self.hidden
            + self.n_classes * self.dim_embed
    }
}

pub fn save_model(dir: &Path, model: &TrainedModel) -> Result<()> {
    let net = &model.net;
    let sidecar = ModelSidecar {
        dim_input: net.w1.ncols(),
        hidden: net.w1.nrows(),
        dim_embed: net.w2.nrows(),
        n_classes: model.head.n_classes(),
        layout: vec!["w1".into(), "b1".into(), "w2".into(), "head".into()],
    };
    let mut bytes = Vec::with_capacity(sidecar.expected_len() * 8);
    for &v in net.w1.iter().chain(net.b1.iter()).chain(net.w2.iter()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &v in model.head.weights().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("model.bin"), bytes).context("writing model.bin")?;
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(&sidecar)?)
        .context("writing model.json")?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let sidecar: ModelSidecar =
        serde_json::from_str(&fs::read_to_string(dir.join("model.json")).context("model.json")?)
            .context("parsing model.json")?;
    let mut file = fs::File::open(dir.join("model.bin")).context("model.bin")?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() != sidecar.expected_len() * 8 {
        bail!(
            "model.bin holds {} bytes but the sidecar shapes need {}",
            bytes.len(),
            sidecar.expected_len() * 8
        );
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let w1 = Array2::from_shape_vec(
        (sidecar.hidden, sidecar.dim_input),
        take(sidecar.hidden * sidecar.dim_input),
    )?;
    let b1 = Array1::from_vec(take(sidecar.hidden));
    let w2 = Array2::from_shape_vec(
        (sidecar.dim_embed, sidecar.hidden),
        take(sidecar.dim_embed * sidecar.hidden),
    )?;
    let head = Array2::from_shape_vec(
        (sidecar.n_classes, sidecar.dim_embed),
        take(sidecar.n_classes * sidecar.dim_embed),
    )?;
    Ok(TrainedModel {
        net: EmbeddingNet { w1, b1, w2 },
        head: ClassHead::new(head).context("model head rows")?,
    })
}

/// In-memory embedding table: one row per embedding with its label and
/// quality score.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub values: Array2<f64>,
    pub labels: Vec<usize>,
    pub qualities: Vec<f64>,
}

/// Writes the `id,label,quality,f0,...,f{d-1}` schema.
pub fn write_embeddings_csv(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(fs::File::create(path)?);
    let dim = table.values.ncols();
    let mut header = vec!["id".to_string(), "label".to_string(), "quality".to_string()];
    header.extend((0..dim).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for i in 0..table.values.nrows() {
        let mut record = vec![
            i.to_string(),
            table.labels[i].to_string(),
            format!("{:.16e}", table.qualities[i]),
        ];
        record.extend((0..dim).map(|k| format!("{:.16e}", table.values[[i, k]])));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the `id,label,quality,f0,...,f{d-1}` schema back, bit-exactly.
pub fn read_embeddings_csv(path: &Path) -> Result<EmbeddingTable> {
    let mut reader = csv::Reader::from_reader(fs::File::open(path).context("embeddings csv")?);
    let header = reader.headers()?.clone();
    if header.len() < 4 || &header[0] != "id" || &header[1] != "label" || &header[2] != "quality" {
        bail!("embeddings csv must start with id,label,quality,f0,...; got {header:?}");
    }
    let dim = header.len() - 3;
    for (k, field) in header.iter().skip(3).enumerate() {
        if field != format!("f{k}") {
            bail!("embeddings csv feature column {k} is named {field}, expected f{k}");
        }
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut qualities = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != dim + 3 {
            bail!("embeddings csv row {line} has {} fields, expected {}", record.len(), dim + 3);
        }
        labels.push(record[1].parse::<usize>().with_context(|| format!("label, row {line}"))?);
        qualities
            .push(record[2].parse::<f64>().with_context(|| format!("quality, row {line}"))?);
        for k in 0..dim {
            rows.push(
                record[3 + k]
                    .parse::<f64>()
                    .with_context(|| format!("feature f{k}, row {line}"))?,
            );
        }
    }
    if labels.is_empty() {
        bail!("embeddings csv holds no rows");
    }
    let values = Array2::from_shape_vec((labels.len(), dim), rows)?;
    Ok(EmbeddingTable { values, labels, qualities })
}

/// Writes `meta.json`: the command, the fully resolved configuration, and
/// the seed expansion used for the run.
pub fn write_meta<C: Serialize>(
    dir: &Path,
    command: &str,
    resolved_config: &C,
    seed_note: &serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({
        "command": command,
        "config": resolved_config,
        "seeds": seed_note,
    });
    let mut f = fs::File::create(dir.join("meta.json"))?;
    f.write_all(serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use maglab::trainer::{generate_dataset, train, LearningRateSchedule, LossSpec, SyntheticSpec, TrainConfig};

    fn tiny_model() -> TrainedModel {
        let spec = SyntheticSpec {
            n_classes: 3,
            dim_input: 4,
            dim_embed: 3,
            samples_per_class: 5,
            quality_noise_max: 0.2,
            seed: 1,
        };
        let data = generate_dataset(&spec).unwrap();
        let cfg = TrainConfig {
            loss: LossSpec::Softmax { s: 8.0 },
            epochs: 2,
            batch_size: 8,
            learning_rate: LearningRateSchedule {
                initial: 0.01,
                decay_epochs: vec![],
                decay_factor: 0.1,
            },
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 2,
            hidden_width: 6,
            init_magnitude: None,
        };
        train(&data, spec.dim_embed, &cfg).unwrap().model
    }

    #[test]
    fn model_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        save_model(dir.path(), &model).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        assert_eq!(model.net.w1, loaded.net.w1);
        assert_eq!(model.net.b1, loaded.net.b1);
        assert_eq!(model.net.w2, loaded.net.w2);
        assert_eq!(model.head.weights(), loaded.head.weights());
    }

    #[test]
    fn embeddings_csv_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.csv");
        let values = ndarray::array![
            [0.12345678912345678, -7.25e-11],
            [std::f64::consts::PI, 110.0000000001],
            [1.0 / 3.0, -2.0 / 7.0],
        ];
        let table = EmbeddingTable {
            values: values.clone(),
            labels: vec![0, 1, 1],
            qualities: vec![0.25, 1.0 / 7.0, 0.999999999999],
        };
        write_embeddings_csv(&path, &table).unwrap();
        let back = read_embeddings_csv(&path).unwrap();
        assert_eq!(back.labels, table.labels);
        for (a, b) in back.qualities.iter().zip(&table.qualities) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in back.values.iter().zip(values.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,label,quality,g0\n0,0,1.0,2.0\n").unwrap();
        assert!(read_embeddings_csv(&path).is_err());
        std::fs::write(&path, "label,quality,f0\n0,1.0,2.0\n").unwrap();
        assert!(read_embeddings_csv(&path).is_err());
    }

    #[test]
    fn truncated_model_bin_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        save_model(dir.path(), &model).unwrap();
        let bytes = std::fs::read(dir.path().join("model.bin")).unwrap();
        std::fs::write(dir.path().join("model.bin"), &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_model(dir.path()).is_err());
    }
}
