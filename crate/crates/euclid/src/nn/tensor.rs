//! Row-major `f64` matrices. Vectors are 1xN or Nx1 tensors.

use crate::nn::error::{NnError, NnResult};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> NnResult<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(NnError::ShapeMismatch(format!(
                "cannot build {}x{} tensor from {} values",
                rows,
                cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> NnResult<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(NnError::ShapeMismatch("from_rows needs a non-empty row list".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NnError::ShapeMismatch(format!(
                    "ragged rows: expected {} columns, found {}",
                    cols,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor { rows: rows.len(), cols, data })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "row vector must be non-empty");
        Tensor { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are always positive
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> NnResult<f64> {
        if self.rows != 1 || self.cols != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "item() on {}x{} tensor",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub(crate) fn require_same_shape(&self, other: &Tensor, what: &str) -> NnResult<()> {
        if !self.same_shape(other) {
            return Err(NnError::ShapeMismatch(format!(
                "{}: {}x{} vs {}x{}",
                what, self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert!(self.same_shape(other));
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// self [m,k] times other [k,n] -> [m,n].
    pub(crate) fn matmul_nn(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul_nn inner dimensions");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (p, &a) in a_row.iter().enumerate().take(k) {
                let b_row = other.row(p);
                for j in 0..n {
                    out_row[j] = a.mul_add(b_row[j], out_row[j]);
                }
            }
        }
        out
    }

    /// self [m,k] times other^T where other is [n,k] -> [m,n].
    pub(crate) fn matmul_nt(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimensions");
        let (m, n) = (self.rows, other.rows);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for j in 0..n {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (a, b) in a_row.iter().zip(b_row.iter()) {
                    acc = a.mul_add(*b, acc);
                }
                out_row[j] = acc;
            }
        }
        out
    }

    /// self^T times other, where self is [k,m] and other [k,n] -> [m,n].
    pub(crate) fn matmul_tn(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimensions");
        let (m, n) = (self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for p in 0..self.rows {
            let a_row = self.row(p);
            let b_row = other.row(p);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = out.row_mut(i);
                for j in 0..n {
                    out_row[j] = a.mul_add(b_row[j], out_row[j]);
                }
            }
        }
        out
    }

    /// Sum over rows -> 1xN.
    pub(crate) fn col_sum(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let out_row = out.row_mut(0);
            for (o, x) in out_row.iter_mut().zip(row.iter()) {
                *o += x;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(2, 3, vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn from_rows_rejects_ragged() {
        assert!(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn matmul_variants_agree_with_hand_computation() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();

        let nn = a.matmul_nn(&b);
        assert_eq!(nn.data(), &[19.0, 22.0, 43.0, 50.0]);

        // a * b^T
        let nt = a.matmul_nt(&b);
        assert_eq!(nt.data(), &[17.0, 23.0, 39.0, 53.0]);

        // a^T * b
        let tn = a.matmul_tn(&b);
        assert_eq!(tn.data(), &[26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn col_sum_sums_rows() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![10.0, 20.0]]).unwrap();
        assert_eq!(a.col_sum().data(), &[11.0, 22.0]);
    }
}
