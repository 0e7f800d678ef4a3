//! Tabular datasets: CSV ingestion, subsetting and standardization.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::vi::Targets;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}, column {column} ({name}): cannot parse {value:?} as a finite number")]
    NonNumeric {
        line: u64,
        column: usize,
        name: String,
        value: String,
    },
    #[error("line {line}: label {value:?} is not a non-negative integer")]
    BadLabel { line: u64, value: String },
    #[error("need a header with at least two columns, got {0}")]
    Header(usize),
    #[error("no complete rows")]
    Empty,
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Regression,
    Classification,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OwnedTargets {
    Real(Vec<f64>),
    Labels(Vec<usize>),
}

impl OwnedTargets {
    pub fn len(&self) -> usize {
        match self {
            OwnedTargets::Real(y) => y.len(),
            OwnedTargets::Labels(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_targets(&self) -> Targets<'_> {
        match self {
            OwnedTargets::Real(y) => Targets::Real(y),
            OwnedTargets::Labels(y) => Targets::Labels(y),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        match self {
            OwnedTargets::Real(y) => OwnedTargets::Real(rows.iter().map(|&i| y[i]).collect()),
            OwnedTargets::Labels(y) => OwnedTargets::Labels(rows.iter().map(|&i| y[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    /// Feature names, then the target name.
    pub columns: Vec<String>,
    /// `[N, D]`
    pub x: Tensor,
    pub y: OwnedTargets,
}

/// Summary of a CSV ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestReport {
    pub rows: usize,
    pub dropped_incomplete: usize,
    /// Inferred class count (classification only).
    pub classes: Option<usize>,
}

impl TabularDataset {
    pub fn new(columns: Vec<String>, x: Tensor, y: OwnedTargets) -> Result<Self, DataError> {
        let (n, d) = x.dims2().map_err(|e| DataError::Shape(e.to_string()))?;
        if y.len() != n {
            return Err(DataError::Shape(format!("{n} rows but {} targets", y.len())));
        }
        if columns.len() != d + 1 {
            return Err(DataError::Shape(format!("{} names for {} columns", columns.len(), d + 1)));
        }
        Ok(Self { columns, x, y })
    }

    /// Header row required; the last column is the target. Rows with an
    /// empty cell are dropped and counted.
    pub fn from_csv<R: Read>(reader: R, task: TaskKind) -> Result<(Self, IngestReport), DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| csv_error(e, 1))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.len() < 2 {
            return Err(DataError::Header(header.len()));
        }
        let d = header.len() - 1;
        let mut xs = Vec::new();
        let mut reals = Vec::new();
        let mut labels = Vec::new();
        let mut dropped = 0;
        let mut record = csv::StringRecord::new();
        loop {
            let more = rdr.read_record(&mut record).map_err(|e| csv_error(e, 0))?;
            if !more {
                break;
            }
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != header.len() {
                return Err(DataError::Malformed {
                    line,
                    message: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            if record.iter().any(str::is_empty) {
                dropped += 1;
                continue;
            }
            for (column, cell) in record.iter().enumerate().take(d) {
                xs.push(parse_cell(cell, line, column, &header[column])?);
            }
            let cell = &record[d];
            match task {
                TaskKind::Regression => reals.push(parse_cell(cell, line, d, &header[d])?),
                TaskKind::Classification => labels.push(parse_label(cell, line)?),
            }
        }
        let n = xs.len() / d;
        if n == 0 {
            return Err(DataError::Empty);
        }
        let (y, classes) = match task {
            TaskKind::Regression => (OwnedTargets::Real(reals), None),
            TaskKind::Classification => {
                let c = labels.iter().max().map_or(0, |m| m + 1);
                (OwnedTargets::Labels(labels), Some(c))
            }
        };
        let x = Tensor::new(vec![n, d], xs).expect("row-major fill");
        Ok((
            Self { columns: header, x, y },
            IngestReport {
                rows: n,
                dropped_incomplete: dropped,
                classes,
            },
        ))
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.x.row(r));
        }
        Self {
            columns: self.columns.clone(),
            x: Tensor::new(vec![rows.len(), d], data).expect("subset shape"),
            y: self.y.subset(rows),
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns).map_err(|e| csv_error(e, 0))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            row.push(match &self.y {
                OwnedTargets::Real(y) => format!("{:?}", y[i]),
                OwnedTargets::Labels(y) => y[i].to_string(),
            });
            w.write_record(&row).map_err(|e| csv_error(e, 0))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error, fallback_line: u64) -> DataError {
    let line = e.position().map_or(fallback_line, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DataError::Io(io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => DataError::Malformed {
            line,
            message: format!("expected {expected_len} fields, found {len}"),
        },
        other => DataError::Malformed {
            line,
            message: format!("{other:?}"),
        },
    }
}

fn parse_cell(cell: &str, line: u64, column: usize, name: &str) -> Result<f64, DataError> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::NonNumeric {
            line,
            column: column + 1,
            name: name.to_string(),
            value: cell.to_string(),
        }),
    }
}

fn parse_label(cell: &str, line: u64) -> Result<usize, DataError> {
    let bad = || DataError::BadLabel {
        line,
        value: cell.to_string(),
    };
    if let Ok(v) = cell.parse::<usize>() {
        return Ok(v);
    }
    // accept "3.0"
    match cell.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 => Ok(v as usize),
        _ => Err(bad()),
    }
}

/// Per-column z-scoring; constant columns get unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = x.dims2().expect("matrix input");
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        for i in 0..n {
            for ((s, m), v) in std.iter_mut().zip(&mean).zip(x.row(i)) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in &mut std {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

/// Affine target scaling for regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn fit(y: &[f64]) -> Self {
        let col = Tensor::new(vec![y.len(), 1], y.to_vec()).expect("column");
        let s = Standardizer::fit(&col);
        Self {
            mean: s.mean[0],
            std: s.std[0],
        }
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn forward(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.mean) / self.std).collect()
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_regression_csv() {
        let text = "a,b,y\n1,2,3\n4,,6\n7,8,9.5\n";
        let (ds, rep) = TabularDataset::from_csv(text.as_bytes(), TaskKind::Regression).unwrap();
        assert_eq!(rep.rows, 2);
        assert_eq!(rep.dropped_incomplete, 1);
        assert_eq!(ds.x.data(), &[1.0, 2.0, 7.0, 8.0]);
        assert_eq!(ds.y, OwnedTargets::Real(vec![3.0, 9.5]));
        assert_eq!(ds.columns, vec!["a", "b", "y"]);
    }

    #[test]
    fn rejects_non_numeric_with_position() {
        let text = "a,b,y\n1,2,3\n4,x,6\n";
        let err = TabularDataset::from_csv(text.as_bytes(), TaskKind::Regression).unwrap_err();
        match err {
            DataError::NonNumeric { line, column, name, .. } => {
                assert_eq!((line, column, name.as_str()), (3, 2, "b"));
            }
            other => panic!("{other}"),
        }
        let err = TabularDataset::from_csv("a,y\n1,nan\n".as_bytes(), TaskKind::Regression).unwrap_err();
        assert!(matches!(err, DataError::NonNumeric { .. }));
    }

    #[test]
    fn rejects_ragged_rows() {
        let err = TabularDataset::from_csv("a,y\n1,2\n3\n".as_bytes(), TaskKind::Regression).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 3, .. }), "{err}");
    }

    #[test]
    fn labels_and_class_count() {
        let text = "a,label\n0.5,0\n0.1,2\n0.3,1.0\n";
        let (ds, rep) = TabularDataset::from_csv(text.as_bytes(), TaskKind::Classification).unwrap();
        assert_eq!(ds.y, OwnedTargets::Labels(vec![0, 2, 1]));
        assert_eq!(rep.classes, Some(3));
        let err = TabularDataset::from_csv("a,l\n1,-1\n".as_bytes(), TaskKind::Classification).unwrap_err();
        assert!(matches!(err, DataError::BadLabel { line: 2, .. }));
    }

    #[test]
    fn csv_round_trip() {
        let x = Tensor::new(vec![2, 2], vec![0.1, -2.5, 1e-7, 3.0]).unwrap();
        let ds = TabularDataset::new(vec!["p".into(), "q".into(), "y".into()], x, OwnedTargets::Real(vec![1.0 / 3.0, 2.0]))
            .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let (back, _) = TabularDataset::from_csv(buf.as_slice(), TaskKind::Regression).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn standardizer() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let s = Standardizer::fit(&x);
        let z = s.apply(&x);
        assert!((z.at(0, 0) + 1.224_744_871_391_589).abs() < 1e-12);
        assert_eq!(z.at(1, 1), 0.0);
        let t = TargetScaler::fit(&[1.0, 3.0]);
        assert_eq!(t.forward(&[1.0, 3.0]), vec![-1.0, 1.0]);
        assert_eq!(t.inverse(1.0), 3.0);
    }
}
