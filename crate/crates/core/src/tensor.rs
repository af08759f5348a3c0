//! Dense/sparse linear-algebra substrate with one fixed memory layout.
//!
//! Every layer-to-matrix rewrite in this crate flattens tensors through
//! [`flat_index`] (channel-major, then row-major spatial). Keeping a single
//! layout authority here is what lets per-layer factors from very different
//! layer types compose into one exact `W`.

use std::fmt;

/// Errors from shape-checked matrix/vector operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Dimensions of two operands do not agree.
    ShapeMismatch { op: &'static str, expected: usize, got: usize },
    /// A coordinate or index is outside its valid range.
    IndexOutOfRange { what: &'static str, index: usize, bound: usize },
    /// A value that must be finite is NaN or infinite.
    NonFinite { what: &'static str },
    /// Structural invariant of a container is violated.
    Invalid { what: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: dimension mismatch (expected {expected}, got {got})")
            }
            TensorError::IndexOutOfRange { what, index, bound } => {
                write!(f, "{what}: index {index} out of range (bound {bound})")
            }
            TensorError::NonFinite { what } => write!(f, "{what}: non-finite value"),
            TensorError::Invalid { what, detail } => write!(f, "{what}: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Logical tensor shape, e.g. `[channels, height, width]` or `[features]`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self, TensorError> {
        if dims.is_empty() {
            return Err(TensorError::Invalid { what: "shape", detail: "no dimensions".into() });
        }
        let mut count: usize = 1;
        for &d in &dims {
            if d == 0 {
                return Err(TensorError::Invalid { what: "shape", detail: "zero dimension".into() });
            }
            count = count.checked_mul(d).ok_or(TensorError::Invalid {
                what: "shape",
                detail: "element count overflows index range".into(),
            })?;
        }
        let _ = count;
        Ok(Shape { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // dims are all >= 1 by construction
    }

    /// Interpret as `[C, H, W]`; a flat shape `[n]` reads as `[n, 1, 1]`.
    pub fn chw(&self) -> Result<(usize, usize, usize), TensorError> {
        match self.dims.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            [n] => Ok((*n, 1, 1)),
            _ => Err(TensorError::Invalid {
                what: "shape",
                detail: format!("expected 1 or 3 dims, got {}", self.dims.len()),
            }),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Flat position of element `(c, h, w)` in a `[C, H, W]` tensor:
/// channel-major, then row-major spatial, i.e. `c·H·W + h·W + w`.
pub fn flat_index(c: usize, h: usize, w: usize, shape: &Shape) -> Result<usize, TensorError> {
    let (ch, hh, ww) = shape.chw()?;
    if c >= ch {
        return Err(TensorError::IndexOutOfRange { what: "channel", index: c, bound: ch });
    }
    if h >= hh {
        return Err(TensorError::IndexOutOfRange { what: "row", index: h, bound: hh });
    }
    if w >= ww {
        return Err(TensorError::IndexOutOfRange { what: "col", index: w, bound: ww });
    }
    Ok(c * hh * ww + h * ww + w)
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        if values.len() != rows * cols {
            return Err(TensorError::Invalid {
                what: "dense matrix",
                detail: format!("{} values for {rows}x{cols}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { what: "dense matrix" });
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Raw mutable access; callers are responsible for keeping values finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · v`, accumulated left-to-right within each row.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, TensorError> {
        if v.len() != self.cols {
            return Err(TensorError::ShapeMismatch { op: "matvec", expected: self.cols, got: v.len() });
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `self · rhs` as a dense matrix; `rhs` may be sparse.
    pub fn compose(&self, rhs: &Matrix) -> Result<DenseMatrix, TensorError> {
        if self.cols != rhs.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "compose",
                expected: self.cols,
                got: rhs.rows(),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols());
        match rhs {
            Matrix::Dense(b) => {
                for i in 0..self.rows {
                    let a_row = self.row(i);
                    let out_row = out.row_mut(i);
                    for (k, &aik) in a_row.iter().enumerate() {
                        if aik != 0.0 {
                            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                                *o += aik * bkj;
                            }
                        }
                    }
                }
            }
            Matrix::Sparse(b) => {
                for i in 0..self.rows {
                    for k in 0..self.cols {
                        let aik = self.get(i, k);
                        if aik != 0.0 {
                            let out_row = out.row_mut(i);
                            for (j, v) in b.row_entries(k) {
                                out_row[j] += aik * v;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Multiply row `i` by `lambda[i]`, in place.
    pub fn scale_rows(&mut self, lambda: &[f64]) -> Result<(), TensorError> {
        if lambda.len() != self.rows {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                expected: self.rows,
                got: lambda.len(),
            });
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { what: "scale_rows" });
        }
        for (r, &l) in lambda.iter().enumerate() {
            for v in self.row_mut(r) {
                *v *= l;
            }
        }
        Ok(())
    }
}

/// Compressed sparse row matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRowMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>, // len = rows + 1
    col_indices: Vec<usize>, // len = nnz, strictly increasing within a row
    entries: Vec<f64>,       // len = nnz
}

impl SparseRowMatrix {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        entries: Vec<f64>,
    ) -> Result<Self, TensorError> {
        let invalid = |detail: String| TensorError::Invalid { what: "sparse matrix", detail };
        if row_offsets.len() != rows + 1 {
            return Err(invalid(format!("row_offsets length {} for {rows} rows", row_offsets.len())));
        }
        if row_offsets[0] != 0 {
            return Err(invalid("row_offsets[0] != 0".into()));
        }
        if row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid("row_offsets decreasing".into()));
        }
        if *row_offsets.last().unwrap() != col_indices.len() || col_indices.len() != entries.len() {
            return Err(invalid("entry count mismatch".into()));
        }
        for r in 0..rows {
            let cols_r = &col_indices[row_offsets[r]..row_offsets[r + 1]];
            if cols_r.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid(format!("row {r}: column indices not strictly increasing")));
            }
            if cols_r.last().is_some_and(|&c| c >= cols) {
                return Err(invalid(format!("row {r}: column index out of range")));
            }
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { what: "sparse matrix" });
        }
        Ok(SparseRowMatrix { rows, cols, row_offsets, col_indices, entries })
    }

    /// Diagonal matrix with the given diagonal values.
    pub fn diagonal(diag: &[f64]) -> Result<Self, TensorError> {
        let n = diag.len();
        Self::from_parts(n, n, (0..=n).collect(), (0..n).collect(), diag.to_vec())
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n]).expect("identity is always valid")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Stored `(column, value)` pairs of row `r`, in increasing column order.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[span.clone()].iter().copied().zip(self.entries[span].iter().copied())
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, TensorError> {
        if v.len() != self.cols {
            return Err(TensorError::ShapeMismatch { op: "matvec", expected: self.cols, got: v.len() });
        }
        Ok((0..self.rows)
            .map(|r| self.row_entries(r).map(|(c, e)| e * v[c]).sum())
            .collect())
    }

    /// Multiply row `i` by `lambda[i]`; sparsity structure unchanged.
    pub fn scale_rows(&mut self, lambda: &[f64]) -> Result<(), TensorError> {
        if lambda.len() != self.rows {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                expected: self.rows,
                got: lambda.len(),
            });
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { what: "scale_rows" });
        }
        for (r, &l) in lambda.iter().enumerate() {
            let span = self.row_offsets[r]..self.row_offsets[r + 1];
            for e in &mut self.entries[span] {
                *e *= l;
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out.set(r, c, v);
            }
        }
        out
    }
}

/// Incremental row-by-row CSR builder; rows must be pushed in order with
/// strictly increasing column indices inside each row.
pub struct SparseBuilder {
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    entries: Vec<f64>,
}

impl SparseBuilder {
    pub fn new(cols: usize) -> Self {
        SparseBuilder { cols, row_offsets: vec![0], col_indices: Vec::new(), entries: Vec::new() }
    }

    pub fn push_entry(&mut self, col: usize, value: f64) {
        debug_assert!(col < self.cols);
        debug_assert!(
            self.col_indices.len() == *self.row_offsets.last().unwrap()
                || *self.col_indices.last().unwrap() < col,
            "columns must be strictly increasing within a row"
        );
        self.col_indices.push(col);
        self.entries.push(value);
    }

    pub fn finish_row(&mut self) {
        self.row_offsets.push(self.col_indices.len());
    }

    pub fn build(self) -> Result<SparseRowMatrix, TensorError> {
        let rows = self.row_offsets.len() - 1;
        SparseRowMatrix::from_parts(rows, self.cols, self.row_offsets, self.col_indices, self.entries)
    }
}

/// A per-layer factor: dense or sparse, one common interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Matrix {
    Dense(DenseMatrix),
    Sparse(SparseRowMatrix),
}

impl Matrix {
    pub fn rows(&self) -> usize {
        match self {
            Matrix::Dense(m) => m.rows(),
            Matrix::Sparse(m) => m.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Matrix::Dense(m) => m.cols(),
            Matrix::Sparse(m) => m.cols(),
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, TensorError> {
        match self {
            Matrix::Dense(m) => m.matvec(v),
            Matrix::Sparse(m) => m.matvec(v),
        }
    }

    pub fn scale_rows(&mut self, lambda: &[f64]) -> Result<(), TensorError> {
        match self {
            Matrix::Dense(m) => m.scale_rows(lambda),
            Matrix::Sparse(m) => m.scale_rows(lambda),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            Matrix::Dense(m) => m.clone(),
            Matrix::Sparse(m) => m.to_dense(),
        }
    }

    /// `self · rhs` with a dense right factor. This is the aggregation
    /// step: the running product stays dense, the new factor may be sparse.
    pub fn mul_dense(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
        if self.cols() != rhs.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_dense",
                expected: self.cols(),
                got: rhs.rows(),
            });
        }
        match self {
            Matrix::Dense(a) => a.compose(&Matrix::Dense(rhs.clone())),
            Matrix::Sparse(a) => {
                let mut out = DenseMatrix::zeros(a.rows(), rhs.cols());
                for i in 0..a.rows() {
                    let out_row = out.row_mut(i);
                    for (k, v) in a.row_entries(i) {
                        for (o, &bkj) in out_row.iter_mut().zip(rhs.row(k)) {
                            *o += v * bkj;
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

impl From<DenseMatrix> for Matrix {
    fn from(m: DenseMatrix) -> Self {
        Matrix::Dense(m)
    }
}

impl From<SparseRowMatrix> for Matrix {
    fn from(m: SparseRowMatrix) -> Self {
        Matrix::Sparse(m)
    }
}
