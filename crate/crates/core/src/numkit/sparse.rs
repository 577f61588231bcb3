//! Compressed sparse row storage.

use super::{Matrix, Rng};
use crate::{Error, Result};

/// Sparsity pattern in CSR form: row `i` holds `indices[offsets[i]..offsets[i+1]]`,
/// strictly increasing within a row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsrPattern {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl CsrPattern {
    /// Builds a pattern from per-row column lists. Rows are sorted and deduplicated.
    pub fn from_rows(cols: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for (i, mut r) in rows.into_iter().enumerate() {
            r.sort_unstable();
            r.dedup();
            if let Some(&last) = r.last() {
                if last >= cols {
                    return Err(Error::Data(format!(
                        "row {i} references column {last} outside [0, {cols})"
                    )));
                }
            }
            indices.extend_from_slice(&r);
            offsets.push(indices.len());
        }
        Ok(Self {
            rows: offsets.len() - 1,
            cols,
            offsets,
            indices,
        })
    }

    /// Raw constructor; validates monotone offsets and strictly increasing rows.
    pub fn from_raw(rows: usize, cols: usize, offsets: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        if offsets.len() != rows + 1 || offsets[0] != 0 || *offsets.last().unwrap() != indices.len() {
            return Err(Error::Data("inconsistent CSR offsets".into()));
        }
        for i in 0..rows {
            if offsets[i] > offsets[i + 1] {
                return Err(Error::Data(format!("CSR offsets decrease at row {i}")));
            }
            let row = &indices[offsets[i]..offsets[i + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data(format!("CSR row {i} not strictly increasing")));
            }
            if row.last().is_some_and(|&c| c >= cols) {
                return Err(Error::Data(format!("CSR row {i} column out of range")));
            }
        }
        Ok(Self {
            rows,
            cols,
            offsets,
            indices,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.row(i).binary_search(&j).is_ok()
    }

    /// Same pattern with the diagonal added to every row (square patterns only).
    pub fn with_self_loops(&self) -> CsrPattern {
        let rows = (0..self.rows)
            .map(|i| {
                let mut r = self.row(i).to_vec();
                if let Err(pos) = r.binary_search(&i) {
                    r.insert(pos, i);
                }
                r
            })
            .collect();
        CsrPattern::from_rows(self.cols.max(self.rows), rows).expect("valid pattern")
    }

    /// Iterator over `(row, col)` pairs in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |i| self.row(i).iter().map(move |&j| (i, j)))
    }
}

/// Weighted CSR matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pattern: CsrPattern,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(pattern: CsrPattern, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::Data(format!(
                "CSR has {} entries but {} values",
                pattern.nnz(),
                values.len()
            )));
        }
        Ok(Self { pattern, values })
    }

    /// Keeps the nonzero entries of a dense matrix.
    pub fn from_dense(m: &Matrix) -> Self {
        let (rows, cols) = m.dim();
        let mut offsets = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for row in m.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            offsets.push(indices.len());
        }
        Self {
            pattern: CsrPattern {
                rows,
                cols,
                offsets,
                indices,
            },
            values,
        }
    }

    pub fn pattern(&self) -> &CsrPattern {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.pattern.rows, self.pattern.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.pattern.row_range(i);
        match self.pattern.indices[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.shape());
        for i in 0..self.pattern.rows {
            for p in self.pattern.row_range(i) {
                out[[i, self.pattern.indices[p]]] = self.values[p];
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let (rows, cols) = self.shape();
        let mut counts = vec![0usize; cols + 1];
        for &j in &self.pattern.indices {
            counts[j + 1] += 1;
        }
        for j in 0..cols {
            counts[j + 1] += counts[j];
        }
        let offsets = counts.clone();
        let mut next = counts;
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..rows {
            for p in self.pattern.row_range(i) {
                let j = self.pattern.indices[p];
                indices[next[j]] = i;
                values[next[j]] = self.values[p];
                next[j] += 1;
            }
        }
        CsrMatrix {
            pattern: CsrPattern {
                rows: cols,
                cols: rows,
                offsets,
                indices,
            },
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `self · dense`.
    pub fn matmul_dense(&self, dense: &Matrix) -> Result<Matrix> {
        let (rows, inner) = self.shape();
        if dense.nrows() != inner {
            return Err(Error::Shape {
                op: "sparse_dense_matmul",
                lhs: self.shape(),
                rhs: dense.dim(),
            });
        }
        let k = dense.ncols();
        let mut out = Matrix::zeros((rows, k));
        let dense = dense.as_standard_layout();
        let d = dense.as_slice().expect("standard layout");
        let o = out.as_slice_mut().expect("standard layout");
        for i in 0..rows {
            let orow = &mut o[i * k..(i + 1) * k];
            for p in self.pattern.row_range(i) {
                let j = self.pattern.indices[p];
                let v = self.values[p];
                let drow = &d[j * k..(j + 1) * k];
                for (a, &b) in orow.iter_mut().zip(drow) {
                    *a += v * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · dense` without materializing the transpose.
    pub fn t_matmul_dense(&self, dense: &Matrix) -> Result<Matrix> {
        let (rows, cols) = self.shape();
        if dense.nrows() != rows {
            return Err(Error::Shape {
                op: "sparse_t_dense_matmul",
                lhs: (cols, rows),
                rhs: dense.dim(),
            });
        }
        let k = dense.ncols();
        let mut out = Matrix::zeros((cols, k));
        let dense = dense.as_standard_layout();
        let d = dense.as_slice().expect("standard layout");
        let o = out.as_slice_mut().expect("standard layout");
        for i in 0..rows {
            let drow = &d[i * k..(i + 1) * k];
            for p in self.pattern.row_range(i) {
                let j = self.pattern.indices[p];
                let v = self.values[p];
                let orow = &mut o[j * k..(j + 1) * k];
                for (a, &b) in orow.iter_mut().zip(drow) {
                    *a += v * b;
                }
            }
        }
        Ok(out)
    }

    /// Inverted dropout on the stored entries: each is zeroed with
    /// probability `rate`, survivors are divided by `1 - rate`. A row that
    /// would lose every nonzero entry is kept unchanged instead.
    pub fn dropout(&self, rate: f64, rng: &mut Rng) -> CsrMatrix {
        if rate <= 0.0 {
            return self.clone();
        }
        let keep = 1.0 - rate;
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.pattern.rows() {
            let row = &self.values[self.pattern.row_range(i)];
            let start = values.len();
            let mut survivors = false;
            for &v in row {
                if rng.bernoulli(keep) {
                    survivors |= v != 0.0;
                    values.push(v / keep);
                } else {
                    values.push(0.0);
                }
            }
            if !survivors && row.iter().any(|&v| v != 0.0) {
                values.truncate(start);
                values.extend_from_slice(row);
            }
        }
        CsrMatrix {
            pattern: self.pattern.clone(),
            values,
        }
    }

    /// Selects rows in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> CsrMatrix {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for &i in rows {
            let r = self.pattern.row_range(i);
            indices.extend_from_slice(&self.pattern.indices[r.clone()]);
            values.extend_from_slice(&self.values[r]);
            offsets.push(indices.len());
        }
        CsrMatrix {
            pattern: CsrPattern {
                rows: rows.len(),
                cols: self.pattern.cols,
                offsets,
                indices,
            },
            values,
        }
    }
}
