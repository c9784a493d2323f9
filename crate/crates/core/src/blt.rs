//! Dense block-lower-triangular (BLT) causal operators over a finite horizon.
//!
//! An operator `R` with horizon `T` and `p x q` blocks is stored by its
//! lower-triangular blocks `R^{i,j}`, `0 <= j <= i < T`, where `j` is the
//! delay: `R^{i,j}` multiplies the input `j` steps in the past. The dense
//! realization is the `(T p) x (T q)` matrix whose block `(t, s)` is
//! `R^{t, t-s}` for `s <= t` and zero above the diagonal.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Condition-number ceiling for diagonal blocks during inversion.
pub const DEFAULT_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BltDocument", into = "BltDocument")]
pub struct BltOperator {
    horizon: usize,
    rows: usize,
    cols: usize,
    blocks: Vec<DMatrix<f64>>,
}

#[inline]
fn tri(i: usize) -> usize {
    i * (i + 1) / 2
}

impl BltOperator {
    pub fn zeros(horizon: usize, rows: usize, cols: usize) -> Self {
        let count = tri(horizon);
        BltOperator { horizon, rows, cols, blocks: vec![DMatrix::zeros(rows, cols); count] }
    }

    pub fn identity(horizon: usize, n: usize) -> Self {
        let mut op = Self::zeros(horizon, n, n);
        for i in 0..horizon {
            *op.block_mut(i, 0) = DMatrix::identity(n, n);
        }
        op
    }

    /// Builds an operator from `(i, j) -> block` pairs; missing blocks are zero.
    pub fn from_blocks<I>(horizon: usize, rows: usize, cols: usize, blocks: I) -> Result<Self>
    where
        I: IntoIterator<Item = ((usize, usize), DMatrix<f64>)>,
    {
        if horizon == 0 || rows == 0 || cols == 0 {
            return dim_err("horizon and block sizes must be positive");
        }
        let mut op = Self::zeros(horizon, rows, cols);
        for ((i, j), m) in blocks {
            if i >= horizon || j > i {
                return Err(Error::BlockIndex { i, j, horizon });
            }
            if m.nrows() != rows || m.ncols() != cols {
                return dim_err(format!("block ({i}, {j}) is {}x{}, expected {rows}x{cols}", m.nrows(), m.ncols()));
            }
            *op.block_mut(i, j) = m;
        }
        Ok(op)
    }

    /// Block diagonal operator with the given per-step blocks.
    pub fn block_diagonal(blocks: &[DMatrix<f64>]) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| Error::Dimension("empty block list".into()))?;
        Self::from_blocks(
            blocks.len(),
            first.nrows(),
            first.ncols(),
            blocks.iter().cloned().enumerate().map(|(i, b)| ((i, 0), b)),
        )
    }

    /// Extracts the causal part of a dense matrix. Entries above the block
    /// diagonal must be at most `tol` in magnitude.
    pub fn from_dense(horizon: usize, rows: usize, cols: usize, dense: &DMatrix<f64>, tol: f64) -> Result<Self> {
        if dense.nrows() != horizon * rows || dense.ncols() != horizon * cols {
            return dim_err(format!(
                "dense matrix is {}x{}, expected {}x{}",
                dense.nrows(),
                dense.ncols(),
                horizon * rows,
                horizon * cols
            ));
        }
        let mut op = Self::zeros(horizon, rows, cols);
        for t in 0..horizon {
            for s in 0..horizon {
                let view = dense.view((t * rows, s * cols), (rows, cols));
                if s > t {
                    if view.amax() > tol {
                        return Err(Error::BlockIndex { i: t, j: s, horizon });
                    }
                } else {
                    *op.block_mut(t, t - s) = view.into_owned();
                }
            }
        }
        Ok(op)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn block_rows(&self) -> usize {
        self.rows
    }

    pub fn block_cols(&self) -> usize {
        self.cols
    }

    /// Block `R^{i,j}` (row `i`, delay `j`).
    pub fn block(&self, i: usize, j: usize) -> &DMatrix<f64> {
        assert!(j <= i && i < self.horizon, "block ({i},{j}) out of range");
        &self.blocks[tri(i) + j]
    }

    pub fn block_mut(&mut self, i: usize, j: usize) -> &mut DMatrix<f64> {
        assert!(j <= i && i < self.horizon, "block ({i},{j}) out of range");
        &mut self.blocks[tri(i) + j]
    }

    /// Block at dense position `(t, s)`; `None` above the diagonal.
    pub fn dense_block(&self, t: usize, s: usize) -> Option<&DMatrix<f64>> {
        (s <= t).then(|| self.block(t, t - s))
    }

    /// Iterates `((i, j), block)` in layout order.
    pub fn blocks(&self) -> impl Iterator<Item = ((usize, usize), &DMatrix<f64>)> {
        (0..self.horizon).flat_map(move |i| (0..=i).map(move |j| ((i, j), self.block(i, j))))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (p, q) = (self.rows, self.cols);
        let mut out = DMatrix::zeros(self.horizon * p, self.horizon * q);
        for t in 0..self.horizon {
            for s in 0..=t {
                out.view_mut((t * p, s * q), (p, q)).copy_from(self.block(t, t - s));
            }
        }
        out
    }

    pub fn mul(&self, other: &BltOperator) -> Result<BltOperator> {
        if self.horizon != other.horizon {
            return dim_err(format!("horizon mismatch {} vs {}", self.horizon, other.horizon));
        }
        if self.cols != other.rows {
            return dim_err(format!("block columns {} do not match block rows {}", self.cols, other.rows));
        }
        let mut out = BltOperator::zeros(self.horizon, self.rows, other.cols);
        for t in 0..self.horizon {
            for s in 0..=t {
                let acc = out.block_mut(t, t - s);
                for l in s..=t {
                    acc.gemm(1.0, self.block(t, t - l), other.block(l, l - s), 1.0);
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &BltOperator) -> Result<BltOperator> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for (a, b) in out.blocks.iter_mut().zip(&other.blocks) {
            *a += b;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &BltOperator) -> Result<BltOperator> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for (a, b) in out.blocks.iter_mut().zip(&other.blocks) {
            *a -= b;
        }
        Ok(out)
    }

    pub fn scale(&self, factor: f64) -> BltOperator {
        let mut out = self.clone();
        out.blocks.iter_mut().for_each(|b| *b *= factor);
        out
    }

    /// Frobenius norm of the dense realization.
    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
    }

    fn check_same_shape(&self, other: &BltOperator) -> Result<()> {
        if self.horizon != other.horizon || self.rows != other.rows || self.cols != other.cols {
            return dim_err("operators differ in horizon or block shape");
        }
        Ok(())
    }

    /// Inverse by block forward substitution.
    pub fn inverse(&self) -> Result<BltOperator> {
        self.inverse_with_limit(DEFAULT_CONDITION_LIMIT)
    }

    pub fn inverse_with_limit(&self, condition_limit: f64) -> Result<BltOperator> {
        if self.rows != self.cols {
            return dim_err(format!("inverse needs square blocks, got {}x{}", self.rows, self.cols));
        }
        let n = self.rows;
        let horizon = self.horizon;
        let mut diag_inv = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let d = self.block(t, 0);
            let sv = d.singular_values();
            let smax = sv.max();
            let smin = sv.min();
            let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
            if !(condition <= condition_limit) {
                return Err(Error::SingularBlock { index: t, condition });
            }
            let inv = d.clone().try_inverse().ok_or(Error::SingularBlock { index: t, condition })?;
            diag_inv.push(inv);
        }
        let mut out = BltOperator::zeros(horizon, n, n);
        for s in 0..horizon {
            *out.block_mut(s, 0) = diag_inv[s].clone();
            for t in (s + 1)..horizon {
                let mut acc = DMatrix::zeros(n, n);
                for l in s..t {
                    acc.gemm(1.0, self.block(t, t - l), out.block(l, l - s), 1.0);
                }
                *out.block_mut(t, t - s) = -(&diag_inv[t] * acc);
            }
        }
        Ok(out)
    }

    pub fn apply(&self, signal: &StackedSignal) -> Result<StackedSignal> {
        if signal.horizon != self.horizon || signal.block_dim != self.cols {
            return dim_err(format!(
                "signal (T={}, d={}) incompatible with operator (T={}, q={})",
                signal.horizon, signal.block_dim, self.horizon, self.cols
            ));
        }
        let (p, q) = (self.rows, self.cols);
        let mut out = DVector::zeros(self.horizon * p);
        for t in 0..self.horizon {
            let mut acc = out.rows_mut(t * p, p);
            for s in 0..=t {
                acc.gemv(1.0, self.block(t, t - s), &signal.values.rows(s * q, q), 1.0);
            }
        }
        Ok(StackedSignal { horizon: self.horizon, block_dim: p, values: out })
    }
}

/// Block-downshift operator: identities on the first block subdiagonal.
pub fn block_downshift(horizon: usize, n: usize) -> BltOperator {
    let mut op = BltOperator::zeros(horizon, n, n);
    for i in 1..horizon {
        *op.block_mut(i, 1) = DMatrix::identity(n, n);
    }
    op
}

/// A stacked signal `[v_0; v_1; ...; v_{T-1}]` with `d`-dimensional blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSignal {
    horizon: usize,
    block_dim: usize,
    values: DVector<f64>,
}

impl StackedSignal {
    pub fn new(horizon: usize, block_dim: usize, values: DVector<f64>) -> Result<Self> {
        if values.len() != horizon * block_dim {
            return dim_err(format!("signal length {} != {horizon} * {block_dim}", values.len()));
        }
        Ok(StackedSignal { horizon, block_dim, values })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn block(&self, t: usize) -> DVector<f64> {
        self.values.rows(t * self.block_dim, self.block_dim).into_owned()
    }
}

/// Flat coordinates for the lower-triangular entries of a BLT operator.
///
/// Blocks are ordered by `i`, then delay `j`; entries are column-major
/// within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BltLayout {
    pub horizon: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BltLayout {
    pub fn new(horizon: usize, rows: usize, cols: usize) -> Self {
        BltLayout { horizon, rows, cols }
    }

    pub fn len(&self) -> usize {
        tri(self.horizon) * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate of entry `(r, c)` of block `(i, j)`.
    #[inline]
    pub fn index(&self, i: usize, j: usize, r: usize, c: usize) -> usize {
        debug_assert!(j <= i && i < self.horizon && r < self.rows && c < self.cols);
        (tri(i) + j) * self.rows * self.cols + c * self.rows + r
    }

    /// Coordinate of dense entry `(row, col)`, or `None` above the block diagonal.
    #[inline]
    pub fn dense_index(&self, row: usize, col: usize) -> Option<usize> {
        let (t, r) = (row / self.rows, row % self.rows);
        let (s, c) = (col / self.cols, col % self.cols);
        (s <= t).then(|| self.index(t, t - s, r, c))
    }

    /// Inverse of [`BltLayout::index`].
    pub fn entry(&self, coord: usize) -> (usize, usize, usize, usize) {
        let per = self.rows * self.cols;
        let block = coord / per;
        let within = coord % per;
        let mut i = 0;
        while tri(i + 1) <= block {
            i += 1;
        }
        let j = block - tri(i);
        (i, j, within % self.rows, within / self.rows)
    }

    pub fn flatten(&self, op: &BltOperator) -> DVector<f64> {
        assert_eq!((op.horizon, op.rows, op.cols), (self.horizon, self.rows, self.cols));
        let mut out = DVector::zeros(self.len());
        for ((i, j), b) in op.blocks() {
            let start = self.index(i, j, 0, 0);
            out.rows_mut(start, self.rows * self.cols).copy_from_slice(b.as_slice());
        }
        out
    }

    pub fn unflatten(&self, values: &[f64]) -> Result<BltOperator> {
        if values.len() != self.len() {
            return dim_err(format!("vector length {} != layout size {}", values.len(), self.len()));
        }
        let per = self.rows * self.cols;
        let mut op = BltOperator::zeros(self.horizon, self.rows, self.cols);
        for (k, b) in op.blocks.iter_mut().enumerate() {
            *b = DMatrix::from_column_slice(self.rows, self.cols, &values[k * per..(k + 1) * per]);
        }
        Ok(op)
    }
}

pub fn blt_vec_layout(horizon: usize, rows: usize, cols: usize) -> BltLayout {
    BltLayout::new(horizon, rows, cols)
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    i: usize,
    j: usize,
    data: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BltDocument {
    #[serde(rename = "T")]
    horizon: usize,
    p: usize,
    q: usize,
    blocks: Vec<BlockEntry>,
}

impl TryFrom<BltDocument> for BltOperator {
    type Error = Error;

    fn try_from(doc: BltDocument) -> Result<Self> {
        let mut blocks = Vec::with_capacity(doc.blocks.len());
        for entry in doc.blocks {
            let m = crate::linalg::matrix_from_rows(&entry.data, doc.p, doc.q)?;
            blocks.push(((entry.i, entry.j), m));
        }
        BltOperator::from_blocks(doc.horizon, doc.p, doc.q, blocks)
    }
}

impl From<BltOperator> for BltDocument {
    fn from(op: BltOperator) -> Self {
        let blocks =
            op.blocks().map(|((i, j), b)| BlockEntry { i, j, data: crate::linalg::matrix_to_rows(b) }).collect();
        BltDocument { horizon: op.horizon, p: op.rows, q: op.cols, blocks }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn single_block_dense() {
        let op = BltOperator::from_blocks(1, 1, 1, [((0, 0), scalar(2.0))]).unwrap();
        assert_eq!(op.to_dense(), dmatrix![2.0]);
    }

    #[test]
    fn two_step_dense_layout() {
        let op =
            BltOperator::from_blocks(2, 1, 1, [((0, 0), scalar(1.0)), ((1, 0), scalar(1.0)), ((1, 1), scalar(3.0))])
                .unwrap();
        assert_eq!(op.to_dense(), dmatrix![1.0, 0.0; 3.0, 1.0]);
    }

    #[test]
    fn upper_block_rejected() {
        let err = BltOperator::from_blocks(2, 1, 1, [((0, 1), scalar(1.0))]).unwrap_err();
        assert!(matches!(err, Error::BlockIndex { i: 0, j: 1, .. }));
    }

    #[test]
    fn wrong_block_shape_rejected() {
        let err = BltOperator::from_blocks(2, 2, 1, [((0, 0), DMatrix::zeros(1, 1))]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn scalar_product_matches_dense() {
        let (a, b, c) = (0.7, -1.3, 2.1);
        let op =
            BltOperator::from_blocks(2, 1, 1, [((0, 0), scalar(a)), ((1, 0), scalar(b)), ((1, 1), scalar(c))]).unwrap();
        let prod = op.mul(&op).unwrap();
        // [[a,0],[c,b]]^2 = [[a^2,0],[c a + b c, b^2]]
        let expected = dmatrix![a * a, 0.0; c * a + b * c, b * b];
        assert!((prod.to_dense() - expected).amax() < 1e-15);
    }

    #[test]
    fn identity_is_neutral() {
        let op =
            BltOperator::from_blocks(3, 2, 1, [((2, 1), dmatrix![1.0; 2.0]), ((0, 0), dmatrix![3.0; -1.0])]).unwrap();
        assert_eq!(BltOperator::identity(3, 2).mul(&op).unwrap(), op);
    }

    #[test]
    fn scalar_inverse() {
        let m = 4.5;
        let op = BltOperator::from_blocks(2, 1, 1, [((0, 0), scalar(1.0)), ((1, 0), scalar(1.0)), ((1, 1), scalar(m))])
            .unwrap();
        let inv = op.inverse().unwrap();
        assert_eq!(inv.to_dense(), dmatrix![1.0, 0.0; -m, 1.0]);
        assert_eq!(BltOperator::identity(4, 3).inverse().unwrap(), BltOperator::identity(4, 3));
    }

    #[test]
    fn singular_diagonal_reported() {
        let op = BltOperator::from_blocks(3, 1, 1, [((0, 0), scalar(1.0)), ((2, 0), scalar(1.0))]).unwrap();
        match op.inverse() {
            Err(Error::SingularBlock { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected singular block, got {other:?}"),
        }
    }

    #[test]
    fn downshift_definition_and_nilpotency() {
        assert_eq!(block_downshift(1, 2).to_dense(), DMatrix::zeros(2, 2));
        let z = block_downshift(3, 1);
        assert_eq!(z.to_dense(), dmatrix![0.0, 0.0, 0.0; 1.0, 0.0, 0.0; 0.0, 1.0, 0.0]);
        let z3 = z.mul(&z).unwrap().mul(&z).unwrap();
        assert_eq!(z3, BltOperator::zeros(3, 1, 1));
    }

    #[test]
    fn apply_downshift_and_identity() {
        let s = StackedSignal::new(3, 1, DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let shifted = block_downshift(3, 1).apply(&s).unwrap();
        assert_eq!(shifted.values().as_slice(), &[0.0, 1.0, 2.0]);
        assert_eq!(BltOperator::identity(3, 1).apply(&s).unwrap(), s);
        assert!(BltOperator::identity(2, 1).apply(&s).is_err());
    }

    #[test]
    fn layout_counts_and_order() {
        assert_eq!(blt_vec_layout(1, 1, 1).len(), 1);
        let l = blt_vec_layout(2, 1, 1);
        assert_eq!(l.len(), 3);
        assert_eq!([l.index(0, 0, 0, 0), l.index(1, 0, 0, 0), l.index(1, 1, 0, 0)], [0, 1, 2]);
        assert_eq!(blt_vec_layout(3, 2, 1).len(), 12);
        let l = blt_vec_layout(4, 3, 2);
        for k in 0..l.len() {
            let (i, j, r, c) = l.entry(k);
            assert_eq!(l.index(i, j, r, c), k);
        }
    }

    #[test]
    fn json_document_roundtrip() {
        let json = r#"{"T":2,"p":1,"q":1,"blocks":[{"i":1,"j":1,"data":[[3.0]]}]}"#;
        let op: BltOperator = serde_json::from_str(json).unwrap();
        assert_eq!(op.to_dense(), dmatrix![0.0, 0.0; 3.0, 0.0]);
        let back: BltOperator = serde_json::from_str(&serde_json::to_string(&op).unwrap()).unwrap();
        assert_eq!(back, op);
        let bad = r#"{"T":2,"p":1,"q":1,"blocks":[{"i":0,"j":1,"data":[[3.0]]}]}"#;
        assert!(serde_json::from_str::<BltOperator>(bad).is_err());
    }
}
