//! Dense row-major matrices used for full-dataset passes: features and
//! soft-max outputs.

use candle_core::{DType, Tensor};

use crate::error::{contract, Error, Result};

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Feature embeddings of a dataset pass, one row per sample.
pub type FeatureMatrix = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; an empty-width matrix has no meaningful rows
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Rows picked by `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, data }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::Shape(format!("vstack {} vs {} columns", self.cols, other.cols)));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self { rows: self.rows + other.rows, cols, data })
    }
}

/// `n × K` matrix of soft-max outputs. Every row is a distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix(Matrix);

pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

impl ProbabilityMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        for (i, row) in m.iter_rows().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(contract(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(contract(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Wraps a tensor of soft-max outputs. Float32 outputs are renormalised
    /// in double precision so the row-sum invariant holds tightly.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let mut m = Matrix::from_tensor(t)?;
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            let s: f64 = row.iter().sum();
            if s > 0.0 && s.is_finite() {
                row.iter_mut().for_each(|p| *p /= s);
            }
        }
        Self::new(m)
    }

    /// One-hot rows for hard labels.
    pub fn one_hot(labels: &[usize], k: usize) -> Result<Self> {
        let mut m = Matrix::zeros(labels.len(), k);
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(contract(format!("label {y} out of range for {k} classes")));
            }
            m.row_mut(i)[y] = 1.0;
        }
        Ok(Self(m))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.0.iter_rows()
    }

    /// Per-row argmax, ties to the smallest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }

    /// Column means (the mean output embedding).
    pub fn mean_row(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.num_classes()];
        for row in self.iter_rows() {
            for (m, p) in mean.iter_mut().zip(row) {
                *m += p;
            }
        }
        let n = self.rows().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.iter_rows().map(crate::losses::prediction_entropy).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self(self.0.select_rows(indices))
    }

    /// Replace row `i` with a one-hot vector at `label`.
    pub fn set_one_hot(&mut self, i: usize, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(contract(format!("label {label} out of range")));
        }
        let row = self.0.row_mut(i);
        row.iter_mut().for_each(|p| *p = 0.0);
        row[label] = 1.0;
        Ok(())
    }

    pub fn vstack(&self, other: &ProbabilityMatrix) -> Result<Self> {
        Ok(Self(self.0.vstack(&other.0)?))
    }
}

/// Index of the maximum entry, ties to the smallest index. Empty input yields 0.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_rows_not_summing_to_one() {
        assert!(ProbabilityMatrix::from_rows(&[vec![0.5, 0.4]]).is_err());
        assert!(ProbabilityMatrix::from_rows(&[vec![0.5, 0.5]]).is_ok());
    }

    #[test]
    fn argmax_ties_to_smallest_index() {
        assert_eq!(argmax(&[0.3, 0.3, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn mean_row_averages_columns() {
        let p = ProbabilityMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(p.mean_row(), vec![0.5, 0.5]);
    }
}
