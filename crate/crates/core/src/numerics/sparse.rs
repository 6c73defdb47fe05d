use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Compressed sparse row matrix used for fixed linear maps (splatting,
/// bilinear sampling, stencil shifts, neighbor averaging).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::shape(
                    "SparseMatrix::from_triplets",
                    format!("entry ({r},{c}) outside {rows}x{cols}"),
                ));
            }
            per_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        for mut entries in per_row {
            entries.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in entries {
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
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

    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row_entries(i).map(|(_, v)| v).sum()
    }

    /// `self · x`
    pub fn mul_dense(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.rows() != self.cols {
            return Err(Error::shape(
                "sparse·dense",
                format!("{}x{} · {:?}", self.rows, self.cols, x.shape()),
            ));
        }
        let mut out = Tensor2::zeros(self.rows, x.cols());
        for i in 0..self.rows {
            for (j, w) in self.row_entries(i) {
                let src = x.row(j);
                for (o, s) in out.row_mut(i).iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · g`
    pub fn transpose_mul_dense(&self, g: &Tensor2) -> Result<Tensor2> {
        if g.rows() != self.rows {
            return Err(Error::shape(
                "sparseᵀ·dense",
                format!("({}x{})ᵀ · {:?}", self.rows, self.cols, g.shape()),
            ));
        }
        let mut out = Tensor2::zeros(self.cols, g.cols());
        for i in 0..self.rows {
            let src = g.row(i).to_vec();
            for (j, w) in self.row_entries(i) {
                for (o, s) in out.row_mut(j).iter_mut().zip(&src) {
                    *o += w * s;
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row_entries(i) {
                out.set(i, j, out.get(i, j) + v);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_products_match_dense() {
        let s = SparseMatrix::from_triplets(2, 3, &[(0, 1, 2.0), (0, 1, 1.0), (1, 0, -1.0), (1, 2, 0.5)])
            .unwrap();
        assert_eq!(s.nnz(), 3);
        let x = Tensor2::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let dense = s.to_dense();
        assert_eq!(s.mul_dense(&x).unwrap(), dense.matmul(&x).unwrap());
        let g = Tensor2::from_fn(2, 2, |i, j| i as f64 - j as f64 + 0.25);
        assert_eq!(
            s.transpose_mul_dense(&g).unwrap(),
            dense.transpose().matmul(&g).unwrap()
        );
    }
}
