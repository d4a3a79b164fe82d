//! Compressed-row sparse matrix for Laplacian system assembly.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// CSR matrix. Column indices are strictly increasing within each row;
/// duplicate triplets are summed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(i, j, _) in &entries {
            if i >= n_rows || j >= n_cols {
                return Err(Error::structure(format!(
                    "triplet ({i},{j}) outside {n_rows}x{n_cols}"
                )));
            }
        }
        entries.sort_by_key(|&(i, j, _)| (i, j));

        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        row_offsets.push(0);
        let mut current_row = 0;
        for (i, j, v) in entries {
            while current_row < i {
                row_offsets.push(col_indices.len());
                current_row += 1;
            }
            if col_indices.len() > *row_offsets.last().unwrap() && *col_indices.last().unwrap() == j
            {
                // duplicate entry within the row: accumulate
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(j);
                values.push(v);
            }
        }
        while current_row < n_rows {
            row_offsets.push(col_indices.len());
            current_row += 1;
        }

        Ok(SparseMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
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

    /// (column indices, values) of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_offsets[i];
        let hi = self.row_offsets[i + 1];
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    /// y = A x, row-parallel.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols, "matvec length mismatch");
        (0..self.n_rows)
            .into_par_iter()
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
            })
            .collect()
    }

    /// Exact structural symmetry check: requires identical patterns and
    /// bitwise-equal mirrored values.
    pub fn is_symmetric_exact(&self) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if self.get(j, i) != v {
                    return false;
                }
            }
        }
        true
    }

    pub fn to_dense(&self) -> crate::matrix::Matrix {
        let mut out = crate::matrix::Matrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[(i, j)] += v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_and_sort() {
        let m = SparseMatrix::from_triplets(
            3,
            3,
            vec![(0, 2, 1.0), (0, 0, 2.0), (0, 2, 0.5), (2, 1, -1.0)],
        )
        .unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.row(0), (&[0usize, 2][..], &[2.0, 1.5][..]));
        assert_eq!(m.get(2, 1), -1.0);
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn matvec_matches_dense() {
        let m =
            SparseMatrix::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0)]).unwrap();
        let y = m.matvec(&[1.0, 2.0, 3.0]);
        assert_eq!(y, vec![7.0, 6.0]);
    }

    #[test]
    fn out_of_bounds_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
    }
}
