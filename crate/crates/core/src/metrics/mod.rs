//! Accuracy/MAE, the feature-divergence diagnostic, embedding export and
//! result emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FedError, Result};
use crate::federation::{CommLedger, Direction};
use crate::nn::{LayerStack, Task};
use crate::partition::Dataset;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

/// Fraction of rows whose arg-max (first on ties) equals the class label.
pub fn accuracy(predictions: &Tensor, labels: &Tensor) -> Result<f64> {
    let n = predictions.batch();
    if n == 0 || labels.batch() != n || labels.row_len() != 1 {
        return Err(FedError::shape("accuracy labels", &[n, 1], labels.shape()));
    }
    let correct = (0..n)
        .filter(|&i| {
            let row = predictions.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as f64 == labels.data()[i]
        })
        .count();
    Ok(correct as f64 / n as f64)
}

pub fn mae(predictions: &Tensor, labels: &Tensor) -> Result<f64> {
    predictions.check_same_shape(labels, "mae")?;
    if predictions.is_empty() {
        return Err(FedError::Empty("mae of an empty batch".into()));
    }
    let sum: f64 = predictions
        .data()
        .iter()
        .zip(labels.data())
        .map(|(p, y)| (p - y).abs())
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Accuracy for classification, MAE for regression.
pub fn task_metric(task: Task, predictions: &Tensor, labels: &Tensor) -> Result<f64> {
    match task {
        Task::Classification { classes } => {
            if predictions.row_len() != classes {
                return Err(FedError::Config(format!(
                    "metric: {classes}-class task but predictions have width {}",
                    predictions.row_len()
                )));
            }
            accuracy(predictions, labels)
        }
        Task::Regression => mae(predictions, labels),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommTotals {
    pub uplink: u64,
    pub downlink: u64,
    pub peer: u64,
}

impl CommTotals {
    pub fn from_ledger(ledger: &CommLedger) -> Self {
        Self {
            uplink: ledger.total(Direction::Uplink),
            downlink: ledger.total(Direction::Downlink),
            peer: ledger.total(Direction::Peer),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub mae: Option<f64>,
    /// One value per evaluated institution model (a single entry for
    /// strategies that end with one global model).
    pub per_institution: Vec<f64>,
    pub loss_curve: Vec<f64>,
    pub comm_totals: CommTotals,
}

impl Metrics {
    pub fn from_per_institution(task: Task, per_institution: Vec<f64>) -> Result<Self> {
        if per_institution.is_empty() {
            return Err(FedError::Empty("no institution metrics".into()));
        }
        let mean = per_institution.iter().sum::<f64>() / per_institution.len() as f64;
        let (accuracy, mae) = match task {
            Task::Classification { .. } => (Some(mean), None),
            Task::Regression => (None, Some(mean)),
        };
        Ok(Self {
            accuracy,
            mae,
            per_institution,
            ..Default::default()
        })
    }

    /// Accuracy if present, otherwise MAE.
    pub fn primary(&self) -> f64 {
        self.accuracy.or(self.mae).unwrap_or(f64::NAN)
    }

    pub fn metric_name(&self) -> &'static str {
        if self.accuracy.is_some() {
            "accuracy"
        } else {
            "mae"
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
    pub partition_ks: f64,
    pub metrics: Metrics,
    pub epochs_run: usize,
    pub wall_time_secs: f64,
}

/// SHA-256 of the canonical config text, hex encoded.
pub fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Distance of each institution's mean feature vector from the pooled mean,
/// divided by the pooled feature standard deviation (root of the mean
/// per-dimension variance).
pub fn feature_divergence(features: &[Tensor]) -> Result<Vec<f64>> {
    if features.len() < 2 {
        return Err(FedError::Empty(
            "feature divergence needs at least two institutions".into(),
        ));
    }
    let width = features[0].row_len();
    let mut total = 0usize;
    let mut pooled = vec![0.0; width];
    let mut means = Vec::with_capacity(features.len());
    for f in features {
        if f.batch() == 0 || f.row_len() != width {
            return Err(FedError::Empty(
                "feature divergence needs non-empty, equally wide feature sets".into(),
            ));
        }
        let mut m = vec![0.0; width];
        for i in 0..f.batch() {
            for (a, &x) in m.iter_mut().zip(f.row(i)) {
                *a += x;
            }
        }
        for (p, a) in pooled.iter_mut().zip(&m) {
            *p += a;
        }
        total += f.batch();
        m.iter_mut().for_each(|a| *a /= f.batch() as f64);
        means.push(m);
    }
    pooled.iter_mut().for_each(|p| *p /= total as f64);
    let mut var = 0.0;
    for f in features {
        for i in 0..f.batch() {
            var += f
                .row(i)
                .iter()
                .zip(&pooled)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>();
        }
    }
    let std = (var / (total * width) as f64).sqrt();
    Ok(means
        .iter()
        .map(|m| {
            let d = m
                .iter()
                .zip(&pooled)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if std > 0.0 {
                d / std
            } else {
                0.0
            }
        })
        .collect())
}

/// Writes `id,label,f0..` rows with the activations at `layer_tag`
/// (`input`, a layer name such as `fc1`, or `@i`).
pub fn export_embeddings(
    model: &LayerStack,
    dataset: &Dataset,
    layer_tag: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let boundary = model.boundary_index(layer_tag).ok_or_else(|| {
        let names: Vec<&str> = model.layers().iter().map(|l| l.name()).collect();
        FedError::Config(format!(
            "export_embeddings: unknown layer tag `{layer_tag}` (known: input, {})",
            names.join(", ")
        ))
    })?;
    let acts = model.activations_at(dataset.features(), boundary)?;
    let width = acts.row_len();
    let mut out = String::from("id,label");
    for j in 0..width {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for i in 0..dataset.len() {
        let _ = write!(out, "{i},{}", dataset.label_values()[i]);
        for v in acts.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| FedError::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    schema_version: u32,
    records: Vec<RunRecord>,
}

pub const CSV_HEADER: &str =
    "config_hash,seed,strategy,partition_ks,metric,value,epochs_run,wall_time_secs,uplink,downlink,peer";

/// Writes `results.json` and `results.csv` into `dir`.
pub fn emit_report(records: &[RunRecord], dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
    let json_path = dir.join("results.json");
    let csv_path = dir.join("results.csv");
    let file = ReportFile {
        schema_version: SCHEMA_VERSION,
        records: records.to_vec(),
    };
    let json = serde_json::to_string_pretty(&file).expect("records serialize");
    std::fs::write(&json_path, json).map_err(|e| FedError::io(&json_path, e))?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in records {
        let c = r.metrics.comm_totals;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.config_hash,
            r.seed,
            r.strategy,
            r.partition_ks,
            r.metrics.metric_name(),
            r.metrics.primary(),
            r.epochs_run,
            r.wall_time_secs,
            c.uplink,
            c.downlink,
            c.peer
        );
    }
    std::fs::write(&csv_path, csv).map_err(|e| FedError::io(&csv_path, e))?;
    Ok((json_path, csv_path))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
    let file: ReportFile = serde_json::from_str(&text)
        .map_err(|e| FedError::Config(format!("{}: {e}", path.display())))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(FedError::Config(format!(
            "{}: schema_version {} (expected {SCHEMA_VERSION})",
            path.display(),
            file.schema_version
        )));
    }
    Ok(file.records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_and_mae() {
        let p = Tensor::from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0], vec![1.0, 1.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![1.0]]).unwrap();
        assert!((accuracy(&p, &y).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let r = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(mae(&r, &r).unwrap(), 0.0);
        let q = Tensor::from_rows(&[vec![2.0], vec![1.0]]).unwrap();
        assert_eq!(mae(&r, &q).unwrap(), 1.5);
    }

    #[test]
    fn per_institution_mean() {
        let m =
            Metrics::from_per_institution(Task::Classification { classes: 2 }, vec![0.5, 0.7, 0.9])
                .unwrap();
        assert!((m.accuracy.unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(m.metric_name(), "accuracy");
        let r = Metrics::from_per_institution(Task::Regression, vec![1.0]).unwrap();
        assert_eq!(r.primary(), 1.0);
    }

    #[test]
    fn divergence_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let d = feature_divergence(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
        let mu = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let neg = Tensor::from_rows(&[vec![-1.0], vec![-1.0]]).unwrap();
        let d = feature_divergence(&[mu, neg]).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15 && (d[1] - 1.0).abs() < 1e-15);
        assert!(feature_divergence(&[a]).is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("abc"), config_hash("abc"));
        assert_eq!(
            config_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let (j, c) = emit_report(&[], dir.path()).unwrap();
        assert_eq!(
            std::fs::read_to_string(c).unwrap(),
            format!("{CSV_HEADER}\n")
        );
        assert!(read_report(j).unwrap().is_empty());
    }
}
