use crate::scalar::Scalar;

/// Compressed sparse row matrix with fixed column order inside each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds from `(row, col, value)` triplets. Entries within a row are
    /// sorted by column so accumulation order is deterministic.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, T)>) -> Self {
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0; rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut vals = Vec::with_capacity(triplets.len());
        for &(r, c, v) in &triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of range");
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            vals.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { rows, cols, row_ptr, col_idx, vals }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    /// `self * x` for a dense row-major `cols x d` matrix.
    pub fn matmul_dense(&self, x: &[T], d: usize) -> Vec<T> {
        assert_eq!(x.len(), self.cols * d);
        let mut out = vec![T::zero(); self.rows * d];
        for r in 0..self.rows {
            let dst = &mut out[r * d..(r + 1) * d];
            for (c, v) in self.row_entries(r) {
                for (o, &xv) in dst.iter_mut().zip(&x[c * d..(c + 1) * d]) {
                    *o = *o + v * xv;
                }
            }
        }
        out
    }

    /// `self^T * g` for a dense row-major `rows x d` matrix.
    pub fn transpose_matmul_dense(&self, g: &[T], d: usize) -> Vec<T> {
        assert_eq!(g.len(), self.rows * d);
        let mut out = vec![T::zero(); self.cols * d];
        for r in 0..self.rows {
            let src = &g[r * d..(r + 1) * d];
            for (c, v) in self.row_entries(r) {
                for (o, &gv) in out[c * d..(c + 1) * d].iter_mut().zip(src) {
                    *o = *o + v * gv;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out[r * self.cols + c] = out[r * self.cols + c] + v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_products_match_dense() {
        let m = CsrMatrix::from_triplets(2, 3, vec![(1, 2, 2.0f64), (0, 0, 1.0), (1, 0, -1.0)]);
        assert_eq!(m.to_dense(), vec![1.0, 0.0, 0.0, -1.0, 0.0, 2.0]);
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3x2
        assert_eq!(m.matmul_dense(&x, 2), vec![1.0, 2.0, 9.0, 10.0]);
        let g = vec![1.0, 0.0, 0.0, 1.0]; // 2x2
        assert_eq!(m.transpose_matmul_dense(&g, 2), vec![1.0, -1.0, 0.0, 0.0, 0.0, 2.0]);
    }
}
