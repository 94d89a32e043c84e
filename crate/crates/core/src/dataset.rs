//! Tabular `(X, y)` data with noise-column bookkeeping and CSV persistence.

use crate::numerics::Matrix;
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("target standard deviation is zero")]
    ZeroVariance,
    #[error("dataset has no rows")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad csv header: {0}")]
    Header(String),
    #[error("bad number `{value}` at row {row}")]
    Number { row: usize, value: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    /// `true` marks a column that does not influence `y`.
    pub noise_mask: Vec<bool>,
    /// Population standard deviation of `y`.
    pub sigma_y: f64,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>, noise_mask: Vec<bool>) -> Result<Self, DatasetError> {
        if y.is_empty() {
            return Err(DatasetError::Empty);
        }
        if x.nrows() != y.len() {
            return Err(DatasetError::Shape(format!("{} rows of X, {} targets", x.nrows(), y.len())));
        }
        if noise_mask.len() != x.ncols() {
            return Err(DatasetError::Shape(format!(
                "{} columns, noise mask of length {}",
                x.ncols(),
                noise_mask.len()
            )));
        }
        let sigma_y = variance(&y).sqrt();
        Ok(Self {
            x,
            y,
            noise_mask,
            sigma_y,
        })
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn columns(&self) -> usize {
        self.x.ncols()
    }

    /// Rows selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, DatasetError> {
        let x = self.x.select(ndarray::Axis(0), indices);
        let y = indices.iter().map(|&i| self.y[i]).collect();
        Self::new(x, y, self.noise_mask.clone())
    }

    /// Writes `x1,...,xn,y` with 17 significant digits per value.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.columns()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (row, &y) in self.x.rows().into_iter().zip(&self.y) {
            let mut record: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            record.push(format!("{y:.16e}"));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Dataset::write_csv`]. The noise mask cannot be
    /// recovered from the file and is supplied by the caller (or all-false).
    pub fn read_csv<R: Read>(reader: R, noise_mask: Option<Vec<bool>>) -> Result<Self, DatasetError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let n = header.len().checked_sub(1).ok_or_else(|| DatasetError::Header("empty".into()))?;
        for (j, h) in header.iter().enumerate() {
            let want = if j == n { "y".to_string() } else { format!("x{}", j + 1) };
            if h != want {
                return Err(DatasetError::Header(format!("column {j} is `{h}`, expected `{want}`")));
            }
        }
        let mut data = Vec::new();
        let mut y = Vec::new();
        for (row, record) in r.records().enumerate() {
            let record = record?;
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| DatasetError::Number {
                    row,
                    value: field.to_string(),
                })?;
                if j == n {
                    y.push(v);
                } else {
                    data.push(v);
                }
            }
        }
        let x = Array2::from_shape_vec((y.len(), n), data).map_err(|e| DatasetError::Shape(e.to_string()))?;
        Self::new(x, y, noise_mask.unwrap_or_else(|| vec![false; n]))
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: &Path, noise_mask: Option<Vec<bool>>) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), noise_mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_round_trip_is_exact() {
        let x = array![[0.1, -1.0 / 3.0], [std::f64::consts::PI, 1e-300]];
        let d = Dataset::new(x, vec![2.0f64.sqrt(), -7.25], vec![false, true]).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2,y\n"));
        let back = Dataset::read_csv(&buf[..], Some(vec![false, true])).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn population_sigma() {
        let d = Dataset::new(array![[0.0], [0.0]], vec![1.0, 3.0], vec![false]).unwrap();
        assert_eq!(d.sigma_y, 1.0);
    }

    #[test]
    fn header_mismatch_is_reported() {
        let err = Dataset::read_csv("a,y\n1,2\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, DatasetError::Header(_)));
    }
}
