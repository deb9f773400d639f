use super::Tensor;
use crate::error::{GrinError, Result};

/// Compressed sparse row matrix.
///
/// Column indices within a row are sorted and unique.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, v) in &entries {
            if r >= n_rows || c >= n_cols {
                return Err(GrinError::Validation(format!(
                    "sparse entry ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
            if !v.is_finite() {
                return Err(GrinError::Validation(format!(
                    "non-finite sparse weight {v} at ({r}, {c})"
                )));
            }
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; n_rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        CsrMatrix {
            n_rows,
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_dense(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(GrinError::dim("from_dense", t.shape(), &[2]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let trip = (0..r)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .filter_map(|(i, j)| {
                let v = t.data()[i * c + j];
                (v != 0.0).then_some((i, j, v))
            });
        Self::from_triplets(r, c, trip)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs stored in row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let trip: Vec<_> = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.n_cols, self.n_rows, trip).expect("transpose of a valid matrix")
    }

    /// Divides each row by its sum; rows summing to zero stay zero.
    pub fn row_normalized(&self) -> CsrMatrix {
        let sums = self.row_sums();
        let mut out = self.clone();
        for i in 0..self.n_rows {
            let s = sums[i];
            for v in &mut out.values[self.indptr[i]..self.indptr[i + 1]] {
                *v = if s > 0.0 { *v / s } else { 0.0 };
            }
        }
        out
    }

    pub fn without_diagonal(&self) -> CsrMatrix {
        let trip: Vec<_> = self.triplets().filter(|&(i, j, _)| i != j).collect();
        Self::from_triplets(self.n_rows, self.n_cols, trip).expect("subset of a valid matrix")
    }

    /// Block-diagonal matrix with `copies` repetitions of `self`.
    pub fn block_diagonal(&self, copies: usize) -> CsrMatrix {
        let mut indptr = Vec::with_capacity(self.n_rows * copies + 1);
        let mut indices = Vec::with_capacity(self.nnz() * copies);
        let mut values = Vec::with_capacity(self.nnz() * copies);
        indptr.push(0);
        for b in 0..copies {
            let col_off = b * self.n_cols;
            for i in 0..self.n_rows {
                for (j, v) in self.row(i) {
                    indices.push(j + col_off);
                    values.push(v);
                }
                indptr.push(indices.len());
            }
        }
        CsrMatrix {
            n_rows: self.n_rows * copies,
            n_cols: self.n_cols * copies,
            indptr,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros([self.n_rows, self.n_cols]);
        for (i, j, v) in self.triplets() {
            t.data_mut()[i * self.n_cols + j] = v;
        }
        t
    }

    /// `y = self · x` for a row-major `x` with `cols` columns.
    pub(crate) fn mul_dense(&self, x: &[f64], cols: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_cols * cols);
        let mut y = vec![0.0; self.n_rows * cols];
        for i in 0..self.n_rows {
            let out = &mut y[i * cols..(i + 1) * cols];
            for (j, w) in self.row(i) {
                let src = &x[j * cols..(j + 1) * cols];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        y
    }

    /// `dx += selfᵀ · dy`.
    pub(crate) fn mul_dense_transposed_acc(&self, dy: &[f64], cols: usize, dx: &mut [f64]) {
        for i in 0..self.n_rows {
            let g = &dy[i * cols..(i + 1) * cols];
            for (j, w) in self.row(i) {
                let dst = &mut dx[j * cols..(j + 1) * cols];
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += w * s;
                }
            }
        }
    }

    /// Applies a node relabelling: entry `(i, j)` moves to `(perm[i], perm[j])`.
    pub fn permuted(&self, perm: &[usize]) -> CsrMatrix {
        let trip: Vec<_> = self.triplets().map(|(i, j, v)| (perm[i], perm[j], v)).collect();
        Self::from_triplets(self.n_rows, self.n_cols, trip).expect("permutation of a valid matrix")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line3() -> CsrMatrix {
        CsrMatrix::from_triplets(3, 3, [(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0)]).unwrap()
    }

    #[test]
    fn duplicates_are_summed() {
        let m = CsrMatrix::from_triplets(2, 2, [(0, 1, 1.0), (0, 1, 2.5)]).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 1), 3.5);
    }

    #[test]
    fn rejects_non_finite_weights() {
        assert!(CsrMatrix::from_triplets(2, 2, [(0, 1, f64::NAN)]).is_err());
        assert!(CsrMatrix::from_triplets(2, 2, [(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn line_graph_product_matches_dense() {
        let y = line3().mul_dense(&[1.0, 2.0, 3.0], 1);
        assert_eq!(y, vec![2.0, 4.0, 2.0]);
    }

    #[test]
    fn row_normalization_leaves_zero_rows() {
        let m = CsrMatrix::from_triplets(3, 3, [(0, 1, 2.0), (0, 2, 6.0)]).unwrap();
        let n = m.row_normalized();
        assert_eq!(n.row_sums(), vec![1.0, 0.0, 0.0]);
        assert_eq!(n.get(0, 2), 0.75);
    }

    #[test]
    fn block_diagonal_repeats() {
        let b = line3().block_diagonal(2);
        assert_eq!(b.n_rows(), 6);
        assert_eq!(b.get(4, 3), 1.0);
        assert_eq!(b.get(4, 0), 0.0);
        assert_eq!(b.nnz(), 8);
    }

    #[test]
    fn transposed_accumulate_matches_dense_transpose() {
        let m = CsrMatrix::from_triplets(2, 3, [(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0)]).unwrap();
        let mut dx = vec![0.0; 3];
        m.mul_dense_transposed_acc(&[1.0, 1.0], 1, &mut dx);
        assert_eq!(dx, vec![1.0, 3.0, 2.0]);
        assert_eq!(m.transpose().mul_dense(&[1.0, 1.0], 1), dx);
    }
}
