use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compressed sparse row matrix in canonical form: within each row the
/// column indices are strictly increasing and no duplicates are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix<S> {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<S>,
}

impl<S: Scalar> CsrMatrix<S> {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<S>,
    ) -> Result<Self> {
        let m = CsrMatrix { n_rows, n_cols, row_ptr, col_idx, values };
        m.validate()?;
        Ok(m)
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        CsrMatrix {
            n_rows,
            n_cols,
            row_ptr: vec![0; n_rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![S::one(); n],
        }
    }

    /// Builds from (row, col, value) triplets. Duplicate coordinates are an error.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, S)>,
    ) -> Result<Self> {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(i, j, v) in &triplets {
            if i >= n_rows || j >= n_cols {
                return Err(Error::Dimension(format!(
                    "entry ({i},{j}) outside {n_rows}x{n_cols}"
                )));
            }
            if prev == Some((i, j)) {
                return Err(Error::Contract(format!("duplicate entry ({i},{j})")));
            }
            prev = Some((i, j));
            row_ptr[i + 1] += 1;
            col_idx.push(j);
            values.push(v);
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(CsrMatrix { n_rows, n_cols, row_ptr, col_idx, values })
    }

    /// Symmetric binary adjacency from undirected edges given as i < j pairs.
    pub fn from_undirected_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut triplets = Vec::with_capacity(edges.len() * 2);
        for &(i, j) in edges {
            if i == j {
                return Err(Error::Contract(format!("self-loop ({i},{i}) not allowed")));
            }
            triplets.push((i, j, S::one()));
            triplets.push((j, i, S::one()));
        }
        Self::from_triplets(n, n, triplets)
    }

    pub fn from_dense(m: &DenseMatrix<S>) -> Self {
        let mut triplets = Vec::new();
        for i in 0..m.rows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                if v != S::zero() {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(m.rows(), m.cols(), triplets).expect("dense scan cannot duplicate")
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_ptr.len() != self.n_rows + 1 || self.row_ptr[0] != 0 {
            return Err(Error::Contract("row_ptr must start at 0 with n_rows+1 offsets".into()));
        }
        if *self.row_ptr.last().unwrap() != self.col_idx.len()
            || self.col_idx.len() != self.values.len()
        {
            return Err(Error::Contract("row_ptr end must equal nnz".into()));
        }
        for w in self.row_ptr.windows(2) {
            if w[1] < w[0] {
                return Err(Error::Contract("row_ptr must be non-decreasing".into()));
            }
        }
        for i in 0..self.n_rows {
            let cols = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
            for w in cols.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::Contract(format!(
                        "row {i} column indices not strictly increasing"
                    )));
                }
            }
            if let Some(&last) = cols.last() {
                if last >= self.n_cols {
                    return Err(Error::Dimension(format!(
                        "row {i} has column {last} >= {}",
                        self.n_cols
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[S]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    pub fn get(&self, i: usize, j: usize) -> Option<S> {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).ok().map(|p| vals[p])
    }

    /// All stored (row, col, value) entries in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, S)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn transpose(&self) -> Self {
        let mut triplets: Vec<(usize, usize, S)> =
            self.iter().map(|(i, j, v)| (j, i, v)).collect();
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        Self::from_triplets(self.n_cols, self.n_rows, triplets)
            .expect("transpose preserves canonical form")
    }

    pub fn is_symmetric(&self) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        self.iter().all(|(i, j, v)| self.get(j, i) == Some(v))
    }

    pub fn to_dense(&self) -> DenseMatrix<S> {
        let mut out = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for (i, j, v) in self.iter() {
            out.set(i, j, v);
        }
        out
    }

    pub fn map_values(&self, f: impl Fn(S) -> S) -> Self {
        CsrMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sparse-dense product `self * rhs`. Parallel over output rows; each
    /// output row is accumulated sequentially, so results are deterministic.
    pub fn spmm(&self, rhs: &DenseMatrix<S>) -> Result<DenseMatrix<S>> {
        if self.n_cols != rhs.rows() {
            return Err(Error::Dimension(format!(
                "spmm: {}x{} * {}x{}",
                self.n_rows,
                self.n_cols,
                rhs.rows(),
                rhs.cols()
            )));
        }
        let m = rhs.cols();
        let mut out = DenseMatrix::zeros(self.n_rows, m);
        let kernel = |(i, orow): (usize, &mut [S])| {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let rrow = rhs.row(j);
                for (o, &r) in orow.iter_mut().zip(rrow) {
                    *o = *o + v * r;
                }
            }
        };
        if self.nnz() * m < 1 << 16 {
            out.as_mut_slice()
                .chunks_mut(m.max(1))
                .enumerate()
                .for_each(|(i, r)| kernel((i, r)));
        } else {
            out.as_mut_slice()
                .par_chunks_mut(m.max(1))
                .enumerate()
                .for_each(kernel);
        }
        Ok(out)
    }

    /// Row sums as a dense vector.
    pub fn row_sums(&self) -> Vec<S> {
        (0..self.n_rows)
            .map(|i| self.row(i).1.iter().copied().sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type C = CsrMatrix<f64>;
    type M = DenseMatrix<f64>;

    #[test]
    fn triplets_roundtrip() {
        let c = C::from_triplets(3, 4, vec![(2, 1, 5.0), (0, 3, 1.0), (0, 0, 2.0)]).unwrap();
        assert_eq!(c.nnz(), 3);
        assert_eq!(c.get(0, 0), Some(2.0));
        assert_eq!(c.get(0, 3), Some(1.0));
        assert_eq!(c.get(2, 1), Some(5.0));
        assert_eq!(c.get(1, 1), None);
        c.validate().unwrap();
    }

    #[test]
    fn duplicate_triplet_rejected() {
        let r = C::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.0)]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn spmm_identity() {
        let c = C::identity(3);
        let x = M::from_fn(3, 2, |i, j| (i + j) as f64);
        let y = c.spmm(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn spmm_matches_dense() {
        let c = C::from_undirected_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let x = M::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.5 - 1.0);
        let sparse = c.spmm(&x).unwrap();
        let dense = c.to_dense().matmul(&x).unwrap();
        assert!(sparse.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn transpose_of_symmetric_is_identity() {
        let c = C::from_undirected_edges(5, &[(0, 1), (1, 4), (2, 3)]).unwrap();
        assert!(c.is_symmetric());
        assert_eq!(c.transpose(), c);
    }
}
