//! Compressed sparse row matrices and the handful of products the encoder needs.

use ndarray::{Array2, ArrayView2, Axis};

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed;
    /// column order within a row is ascending.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    /// Keeps the exact nonzero entries of a dense matrix.
    pub fn from_dense(m: ArrayView2<'_, f64>) -> Self {
        let (rows, cols) = m.dim();
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in m.axis_iter(Axis(0)) {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[[r, c]] = v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Csr {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                triplets.push((c, r, v));
            }
        }
        Csr::from_triplets(self.cols, self.rows, triplets)
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(self.cols, rhs.nrows(), "csr matmul inner dimension");
        let k = rhs.ncols();
        let mut out = Array2::zeros((self.rows, k));
        for r in 0..self.rows {
            let mut acc = out.row_mut(r);
            for (c, v) in self.row(r) {
                acc.scaled_add(v, &rhs.row(c));
            }
        }
        out
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(self.rows, rhs.nrows(), "csr t_matmul inner dimension");
        let k = rhs.ncols();
        let mut out = Array2::zeros((self.cols, k));
        for r in 0..self.rows {
            let src = rhs.row(r);
            for (c, v) in self.row(r) {
                out.row_mut(c).scaled_add(v, &src);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn products_match_dense() {
        let d = array![[1.0, 0.0, 2.0], [0.0, 0.0, 3.0]];
        let s = Csr::from_dense(d.view());
        assert_eq!(s.nnz(), 3);
        let b = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(s.matmul(b.view()), d.dot(&b));
        let c = array![[1.0], [2.0]];
        assert_eq!(s.t_matmul(c.view()), d.t().dot(&c));
        assert_eq!(s.transpose().to_dense(), d.t().to_owned());
    }

    #[test]
    fn triplet_duplicates_are_summed() {
        let s = Csr::from_triplets(2, 2, vec![(1, 1, 1.0), (0, 1, 2.0), (1, 1, 0.5)]);
        assert_eq!(s.get(1, 1), 1.5);
        assert_eq!(s.get(0, 1), 2.0);
        assert_eq!(s.get(0, 0), 0.0);
    }
}
