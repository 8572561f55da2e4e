use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

/// Below this many multiply-adds a serial loop beats the rayon dispatch.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

impl<S: Scalar> DenseMatrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "buffer of {} entries cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            if r.len() != m {
                return Err(Error::Dimension("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(DenseMatrix { rows: n, cols: m, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
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

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Dimension(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// `self * other`.
    ///
    /// i-k-j loop order with a skip on zero left entries, so a row-sparse
    /// left operand (e.g. a post-TopK activation) multiplies at cost
    /// proportional to its nonzeros. Parallel over output rows; each output
    /// element is accumulated by exactly one thread in a fixed order, so the
    /// result is bit-identical to the serial loop.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let m = other.cols;
        let mut out = Self::zeros(self.rows, m);
        let kernel = |(orow, arow): (&mut [S], &[S])| {
            for (k, &a) in arow.iter().enumerate() {
                if a != S::zero() {
                    let brow = &other.data[k * m..(k + 1) * m];
                    for (o, &b) in orow.iter_mut().zip(brow) {
                        *o = *o + a * b;
                    }
                }
            }
        };
        if self.rows * self.cols * m < PAR_FLOP_THRESHOLD {
            out.data
                .chunks_mut(m.max(1))
                .zip(self.data.chunks(self.cols.max(1)))
                .for_each(kernel);
        } else {
            out.data
                .par_chunks_mut(m.max(1))
                .zip(self.data.par_chunks(self.cols.max(1)))
                .for_each(kernel);
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "matmul_nt: {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.rows;
        let k = self.cols;
        let mut out = Self::zeros(self.rows, n);
        let kernel = |(orow, arow): (&mut [S], &[S])| {
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &other.data[j * k..(j + 1) * k];
                *o = dot(arow, brow);
            }
        };
        if self.rows * n * k < PAR_FLOP_THRESHOLD {
            out.data
                .chunks_mut(n.max(1))
                .zip(self.data.chunks(k.max(1)))
                .for_each(kernel);
        } else {
            out.data
                .par_chunks_mut(n.max(1))
                .zip(self.data.par_chunks(k.max(1)))
                .for_each(kernel);
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: S) -> Self {
        let data = self.data.iter().map(|&a| a * s).collect();
        DenseMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let data = self.data.iter().map(|&a| f(a)).collect();
        DenseMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Row sums as an n x 1 column.
    pub fn row_sum(&self) -> Self {
        let data = (0..self.rows).map(|i| self.row(i).iter().copied().sum()).collect();
        DenseMatrix { rows: self.rows, cols: 1, data }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|&&x| x != S::zero()).count()
    }

    pub fn frob_norm(&self) -> S {
        self.data.iter().map(|&x| x * x).sum::<S>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), |m, d| if d > m { d } else { m })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Unrolled dot product; four independent accumulators keep the FP order
/// fixed while letting the lanes pipeline.
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut tail = S::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = DenseMatrix<f64>;

    #[test]
    fn matmul_small() {
        let a = M::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = M::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = M::from_fn(5, 7, |i, j| (i * 7 + j) as f64 * 0.3 - 2.0);
        let b = M::from_fn(4, 7, |i, j| (i as f64 - j as f64) * 0.11);
        let via_nt = a.matmul_nt(&b).unwrap();
        let via_t = a.matmul(&b.transpose()).unwrap();
        assert!(via_nt.max_abs_diff(&via_t) < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = M::zeros(2, 3);
        let b = M::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn parallel_matches_serial() {
        // Size above the parallel threshold; compare against a naive triple loop.
        let a = M::from_fn(37, 53, |i, j| ((i * 53 + j) % 17) as f64 * 0.25 - 1.0);
        let b = M::from_fn(53, 41, |i, j| ((i * 41 + j) % 13) as f64 * 0.5 - 3.0);
        let fast = a.matmul(&b).unwrap();
        let mut naive = M::zeros(37, 41);
        for i in 0..37 {
            for j in 0..41 {
                let mut s = 0.0;
                for k in 0..53 {
                    s += a.get(i, k) * b.get(k, j);
                }
                naive.set(i, j, s);
            }
        }
        assert!(fast.max_abs_diff(&naive) < 1e-9);
    }

    #[test]
    fn row_sum_column() {
        let a = M::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]]).unwrap();
        let s = a.row_sum();
        assert_eq!(s.shape(), (2, 1));
        assert_eq!(s.as_slice(), &[6.0, 0.0]);
    }
}
