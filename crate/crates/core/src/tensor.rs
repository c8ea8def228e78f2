//! Dense row-major `f64` tensors. Axis 0 is always the batch axis.

use crate::error::{FedError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(FedError::Config(format!(
                "tensor dims must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FedError::shape("tensor data", &[expected], &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `[rows, cols]` matrix; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 {
            return Err(FedError::Empty("matrix rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(FedError::shape("matrix row", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Per-sample dims (everything after the batch axis).
    pub fn sample_dims(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(FedError::shape("reshape", &shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `[start, end)` along the batch axis.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.batch() {
            return Err(FedError::Config(format!(
                "row range {start}..{end} invalid for batch {}",
                self.batch()
            )));
        }
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * w..end * w].to_vec(),
        })
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(FedError::Empty("row gather".into()));
        }
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.batch() {
                return Err(FedError::Config(format!(
                    "row index {i} out of range for batch {}",
                    self.batch()
                )));
            }
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Stacks parts along the batch axis, in the order given.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| FedError::Empty("concat_batch parts".into()))?;
        let trailing = first.sample_dims();
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        let mut batch = 0;
        for p in parts {
            if p.sample_dims() != trailing {
                return Err(FedError::shape(
                    "concat_batch trailing dims",
                    trailing,
                    p.sample_dims(),
                ));
            }
            batch += p.batch();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(Self { shape, data })
    }

    /// Inverse of [`Tensor::concat_batch`]: cuts the batch into consecutive slices.
    pub fn split_batch(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if sizes.iter().sum::<usize>() != self.batch() {
            return Err(FedError::shape(
                "split_batch sizes",
                &[self.batch()],
                &[sizes.iter().sum()],
            ));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &n in sizes {
            out.push(self.rows(start, start + n)?);
            start += n;
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Divides every entry by `n` (used to turn SUM-reduced gradients into means).
    pub fn div_scalar(&mut self, n: f64) {
        self.data.iter_mut().for_each(|v| *v /= n);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn check_same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(FedError::shape(context, &self.shape, &other.shape));
        }
        Ok(())
    }

    /// True when shapes match and every entry has the same bit pattern.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest `|a - b| / max(|a|, |b|, floor)` over all entries.
    pub fn max_rel_diff(&self, other: &Tensor, floor: f64) -> f64 {
        assert_eq!(self.shape, other.shape, "max_rel_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Largest relative difference across two aligned weight lists.
pub fn max_rel_diff_all(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "weight list length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_rel_diff(y, floor))
        .fold(0.0, f64::max)
}

pub fn bitwise_eq_all(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn concat_single_part_is_identity() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::concat_batch(std::slice::from_ref(&t)).unwrap(), t);
    }

    #[test]
    fn concat_two_rows() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let c = Tensor::concat_batch(&[a, b]).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_four_institution_batches() {
        let parts: Vec<_> = (0..4).map(|_| Tensor::zeros(&[32, 8, 4, 4])).collect();
        let c = Tensor::concat_batch(&parts).unwrap();
        assert_eq!(c.shape(), &[128, 8, 4, 4]);
        let back = c.split_batch(&[32, 32, 32, 32]).unwrap();
        assert_eq!(back, parts);
    }

    #[test]
    fn concat_errors() {
        assert!(matches!(Tensor::concat_batch(&[]), Err(FedError::Empty(_))));
        let a = Tensor::zeros(&[1, 2]);
        let b = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            Tensor::concat_batch(&[a, b]),
            Err(FedError::Shape { .. })
        ));
    }
}
