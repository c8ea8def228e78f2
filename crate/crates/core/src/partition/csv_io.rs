use std::path::Path;

use super::Dataset;
use crate::error::{FedError, Result};
use crate::nn::Task;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    pub label_column: String,
    pub task: Task,
    /// Optional per-sample shape for the feature columns (e.g. `[1, 8, 8]`).
    pub feature_dims: Option<Vec<usize>>,
}

impl CsvSchema {
    pub fn new(task: Task) -> Self {
        Self {
            label_column: "label".into(),
            task,
            feature_dims: None,
        }
    }
}

/// Reads a header-first CSV: every column except the label column is a feature.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => FedError::io(path, io),
            other => FedError::Csv {
                line: 1,
                message: format!("{other:?}"),
            },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| FedError::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| {
            FedError::Config(format!(
                "schema: missing label column `{}` in {}",
                schema.label_column,
                path.display()
            ))
        })?;
    let width = headers.len() - 1;
    if width == 0 {
        return Err(FedError::Config(format!(
            "schema: {} has no feature columns",
            path.display()
        )));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| FedError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            return Err(FedError::Csv {
                line,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| FedError::Csv {
                line,
                message: format!("column `{}`: `{cell}` is not a number", &headers[c]),
            })?;
            if c == label_col {
                labels.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let m = labels.len();
    if m == 0 {
        return Err(FedError::Empty(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    let mut shape = vec![m];
    match &schema.feature_dims {
        Some(dims) if dims.iter().product::<usize>() == width => shape.extend(dims),
        Some(dims) => {
            return Err(FedError::Config(format!(
                "schema: feature dims {dims:?} do not match {width} feature columns"
            )))
        }
        None => shape.push(width),
    }
    Dataset::new(
        Tensor::new(shape, features)?,
        Tensor::new(vec![m, 1], labels)?,
        schema.task,
    )
}

/// Writes features as `f0..f{d-1}` followed by a `label` column.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => FedError::io(path, io),
        other => FedError::Config(format!("{other:?}")),
    })?;
    let width = dataset.features().row_len();
    let io_err = |e: csv::Error| FedError::io(path, std::io::Error::other(e.to_string()));
    let mut header: Vec<String> = (0..width).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(io_err)?;
    for i in 0..dataset.len() {
        let mut row: Vec<String> = dataset
            .features()
            .row(i)
            .iter()
            .map(f64::to_string)
            .collect();
        row.push(dataset.label_values()[i].to_string());
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| FedError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn two_row_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,y,label\n0.5,1.5,0\n-2,3e-1,1\n");
        let d = load_csv(&p, &CsvSchema::new(Task::Classification { classes: 2 })).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.features().data(), &[0.5, 1.5, -2.0, 0.3]);
        assert_eq!(d.label_values(), &[0.0, 1.0]);
    }

    #[test]
    fn missing_label_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,y\n0.5,1.5\n");
        let err = load_csv(&p, &CsvSchema::new(Task::Regression)).unwrap_err();
        assert!(matches!(err, FedError::Config(m) if m.contains("label")));
    }

    #[test]
    fn bad_cells_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,label\n1,0\nabc,1\n");
        match load_csv(&p, &CsvSchema::new(Task::Regression)) {
            Err(FedError::Csv { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("{other:?}"),
        }
        let p = write(&dir, "b.csv", "x,label\n1,0\n2\n");
        assert!(matches!(
            load_csv(&p, &CsvSchema::new(Task::Regression)),
            Err(FedError::Csv { line: 3, .. })
        ));
    }

    #[test]
    fn write_read_round_trip() {
        let d = super::super::synth_regression(40, 3, 0.3, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.csv");
        write_csv(&d, &p).unwrap();
        let back = load_csv(&p, &CsvSchema::new(Task::Regression)).unwrap();
        assert!(back.features().max_rel_diff(d.features(), 1e-300) <= 1e-15);
        assert!(back.labels().max_rel_diff(d.labels(), 1e-300) <= 1e-15);
    }
}
