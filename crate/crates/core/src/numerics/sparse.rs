use crate::error::{bail, Result};

use super::dense::DenseMatrix;

/// Compressed-sparse-row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Validates and wraps raw CSR arrays.
    pub fn from_csr(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != rows + 1 {
            bail!(Format, "row pointer length {} != rows + 1", indptr.len());
        }
        if indptr[0] != 0 || indptr[rows] != indices.len() || indices.len() != values.len() {
            bail!(Format, "inconsistent CSR array lengths");
        }
        for r in 0..rows {
            if indptr[r] > indptr[r + 1] {
                bail!(Format, "row pointers decrease at row {r}");
            }
            let cols_in_row = &indices[indptr[r]..indptr[r + 1]];
            if cols_in_row.iter().any(|&c| c >= cols) {
                bail!(Format, "column index out of range in row {r}");
            }
            if cols_in_row.windows(2).any(|w| w[0] >= w[1]) {
                bail!(Format, "column indices not strictly increasing in row {r}");
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite sparse value");
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds from `(row, col, value)` triplets in any order; duplicates
    /// are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|(r, c, _)| *r >= rows || *c >= cols) {
            bail!(Data, "triplet ({r}, {c}) out of range for {rows}x{cols}");
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
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
        Self::from_csr(rows, cols, indptr, indices, values)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
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

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(column, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                let slot = next[c];
                indices[slot] = r;
                values[slot] = v;
                next[c] += 1;
            }
        }
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            indptr,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    /// Entry-wise weighted sum of same-shape matrices.
    pub fn weighted_sum(parts: &[(&SparseMatrix, f64)]) -> Result<SparseMatrix> {
        let Some((first, _)) = parts.first() else {
            bail!(Config, "weighted_sum needs at least one matrix");
        };
        let (rows, cols) = (first.rows, first.cols);
        let mut triplets = Vec::new();
        for (m, w) in parts {
            if m.rows != rows || m.cols != cols {
                bail!(Config, "weighted_sum shape mismatch");
            }
            for r in 0..rows {
                triplets.extend(m.row(r).map(|(c, v)| (r, c, v * w)));
            }
        }
        Self::from_triplets(rows, cols, triplets)
    }
}

/// Sparse-dense product `a · b`.
pub fn spmm(a: &SparseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.rows() {
        bail!(
            Config,
            "spmm dimension mismatch: {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        );
    }
    let width = b.cols();
    let mut out = DenseMatrix::zeros(a.rows(), width);
    for r in 0..a.rows() {
        let out_row = out.row_mut(r);
        for (c, v) in a.row(r) {
            for (o, &x) in out_row.iter_mut().zip(b.row(c)) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_validation() {
        assert!(SparseMatrix::from_csr(2, 2, vec![0, 1, 2], vec![1, 0], vec![1.0, 1.0]).is_ok());
        // decreasing row pointer
        assert!(SparseMatrix::from_csr(2, 2, vec![0, 2, 1], vec![0, 1], vec![1.0, 1.0]).is_err());
        // repeated column
        assert!(SparseMatrix::from_csr(1, 2, vec![0, 2], vec![1, 1], vec![1.0, 1.0]).is_err());
        // out of range
        assert!(SparseMatrix::from_csr(1, 2, vec![0, 1], vec![2], vec![1.0]).is_err());
    }

    #[test]
    fn triplets_merge_duplicates() {
        let m = SparseMatrix::from_triplets(2, 3, vec![(1, 2, 1.0), (0, 0, 2.0), (1, 2, 0.5)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(1, 2), 1.5);
        assert_eq!(m.get(0, 0), 2.0);
        assert_eq!(m.get(0, 1), 0.0);
    }

    #[test]
    fn transpose_matches_dense() {
        let m = SparseMatrix::from_triplets(3, 4, vec![(0, 3, 1.0), (2, 0, -2.0), (1, 1, 0.5), (2, 3, 4.0)])
            .unwrap();
        assert_eq!(m.transpose().to_dense(), m.to_dense().transpose());
    }

    #[test]
    fn spmm_identity_and_zero() {
        let b = DenseMatrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64 + 0.25);
        assert_eq!(spmm(&SparseMatrix::identity(3), &b).unwrap(), b);
        assert_eq!(spmm(&SparseMatrix::zeros(3, 3), &b).unwrap(), DenseMatrix::zeros(3, 2));
        assert!(spmm(&SparseMatrix::identity(2), &b).is_err());
    }
}
