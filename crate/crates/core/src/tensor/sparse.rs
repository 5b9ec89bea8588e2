use super::{Real, Result, TensorError};

/// Constant CSR matrix used as a fixed left operand (e.g. a normalized
/// adjacency). Gradients never flow into its values.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix<T: Real = f32> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> SparseMatrix<T> {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, T)>) -> Result<Self> {
        if let Some(&(r, c, _)) = entries.iter().find(|(r, c, _)| *r >= rows || *c >= cols) {
            return Err(TensorError::Contract(format!(
                "sparse entry ({r}, {c}) outside {rows}x{cols}"
            )));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<T> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                let tail = values.last_mut().expect("previous entry exists");
                *tail = *tail + v;
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
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
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

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `self · x` where `x` is `cols × n`, row-major.
    pub fn matmul_dense(&self, x: &[T], n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * n];
        let mut acc = vec![0f64; n];
        for r in 0..self.rows {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (c, w) in self.row_entries(r) {
                let w = w.as_f64();
                for (s, xv) in acc.iter_mut().zip(&x[c * n..(c + 1) * n]) {
                    *s += w * xv.as_f64();
                }
            }
            for (o, s) in out[r * n..(r + 1) * n].iter_mut().zip(&acc) {
                *o = T::from_f64(*s);
            }
        }
        out
    }

    /// `selfᵀ · g` where `g` is `rows × n`.
    pub fn transpose_matmul_dense(&self, g: &[T], n: usize) -> Vec<T> {
        let mut acc = vec![0f64; self.cols * n];
        for r in 0..self.rows {
            let gr = &g[r * n..(r + 1) * n];
            for (c, w) in self.row_entries(r) {
                let w = w.as_f64();
                for (s, gv) in acc[c * n..(c + 1) * n].iter_mut().zip(gr) {
                    *s += w * gv.as_f64();
                }
            }
        }
        acc.into_iter().map(T::from_f64).collect()
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out[r * self.cols + c] = v;
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> SparseMatrix<U> {
        SparseMatrix {
            rows: self.rows,
            cols: self.cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_products_match_dense() {
        let m = SparseMatrix::<f64>::from_triplets(
            2,
            3,
            vec![(0, 1, 1.0), (1, 2, 2.0), (0, 1, 0.5), (1, 0, -1.0)],
        )
        .unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.to_dense(), vec![0.0, 1.5, 0.0, -1.0, 0.0, 2.0]);
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(m.matmul_dense(&x, 2), vec![4.5, 6.0, 9.0, 10.0]);
        let g = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(m.transpose_matmul_dense(&g, 2), vec![0.0, -1.0, 1.5, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn out_of_range_entry_rejected() {
        assert!(SparseMatrix::<f32>::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
    }
}
