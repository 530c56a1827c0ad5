//! Gradient representations: dense tensors, indexed row slices, and the
//! per-rank bundles handed to the exchange layer.

mod accumulate;

pub use accumulate::{
    accumulate, accumulate_legacy, accumulate_proposed, concat_slices, convert_to_dense,
    densify_pass, materialize, reduce_dense, Accumulated, AccumulationRule,
};

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bytes per element used for accounting when none is given (32-bit floats).
pub const DEFAULT_DTYPE_WIDTH: usize = 4;

/// Bytes charged per stored row index (64-bit indices).
pub const INDEX_WIDTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("invalid shape {0:?}: shapes must be non-empty with every extent >= 1")]
    InvalidShape(Vec<usize>),
    #[error("value count {actual} does not match expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("row index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("operation requires at least one input")]
    EmptyInput,
    #[error("duplicate variable `{0}` in bundle")]
    DuplicateVar(VarId),
    #[error("dtype width must be >= 1")]
    InvalidDtypeWidth,
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// A fully materialized gradient tensor (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    shape: Vec<usize>,
    values: Vec<f64>,
    dtype_width: usize,
}

impl DenseGrad {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        Self::with_dtype_width(shape, values, DEFAULT_DTYPE_WIDTH)
    }

    pub fn with_dtype_width(
        shape: Vec<usize>,
        values: Vec<f64>,
        dtype_width: usize,
    ) -> Result<Self, TensorError> {
        let n = check_shape(&shape)?;
        if values.len() != n {
            return Err(TensorError::LengthMismatch {
                expected: n,
                actual: values.len(),
            });
        }
        if dtype_width == 0 {
            return Err(TensorError::InvalidDtypeWidth);
        }
        Ok(Self {
            shape,
            values,
            dtype_width,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = check_shape(&shape)?;
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self, TensorError> {
        let n = check_shape(&shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dtype_width(&self) -> usize {
        self.dtype_width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn row_width(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn nominal_byte_size(&self) -> u64 {
        (self.values.len() * self.dtype_width) as u64
    }

    /// Full-coverage slice view: one row per dense row, indices `0..rows`.
    pub fn to_slices(&self) -> SliceGrad {
        let block = SliceBlock {
            indices: (0..self.rows()).collect(),
            values: self.values.clone(),
        };
        SliceGrad {
            dense_shape: self.shape.clone(),
            row_width: self.row_width(),
            rows: self.rows(),
            blocks: vec![Arc::new(block)],
            dtype_width: self.dtype_width,
        }
    }
}

/// One contiguous run of indexed rows. Blocks are immutable and shared
/// between the slice gradients that concatenate them.
#[derive(Debug, PartialEq)]
pub struct SliceBlock {
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SliceBlock {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Indexed-slices gradient over axis 0 of `dense_shape`. Indices may repeat.
///
/// Rows are stored as a sequence of shared blocks; concatenation appends
/// block handles and never copies or sums row data.
#[derive(Debug, Clone)]
pub struct SliceGrad {
    dense_shape: Vec<usize>,
    row_width: usize,
    rows: usize,
    blocks: Vec<Arc<SliceBlock>>,
    dtype_width: usize,
}

impl SliceGrad {
    pub fn new(
        dense_shape: Vec<usize>,
        indices: Vec<usize>,
        row_values: Vec<f64>,
    ) -> Result<Self, TensorError> {
        Self::with_dtype_width(dense_shape, indices, row_values, DEFAULT_DTYPE_WIDTH)
    }

    pub fn with_dtype_width(
        dense_shape: Vec<usize>,
        indices: Vec<usize>,
        row_values: Vec<f64>,
        dtype_width: usize,
    ) -> Result<Self, TensorError> {
        check_shape(&dense_shape)?;
        if dtype_width == 0 {
            return Err(TensorError::InvalidDtypeWidth);
        }
        let row_width: usize = dense_shape[1..].iter().product();
        let expected = indices.len() * row_width;
        if row_values.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                actual: row_values.len(),
            });
        }
        if let Some(&index) = indices.iter().find(|&&i| i >= dense_shape[0]) {
            return Err(TensorError::IndexOutOfRange {
                index,
                rows: dense_shape[0],
            });
        }
        let rows = indices.len();
        let blocks = if rows == 0 {
            Vec::new()
        } else {
            vec![Arc::new(SliceBlock {
                indices,
                values: row_values,
            })]
        };
        Ok(Self {
            dense_shape,
            row_width,
            rows,
            blocks,
            dtype_width,
        })
    }

    pub fn empty(dense_shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(dense_shape, Vec::new(), Vec::new())
    }

    pub fn dense_shape(&self) -> &[usize] {
        &self.dense_shape
    }

    pub fn row_width(&self) -> usize {
        self.row_width
    }

    /// Number of stored rows (counting repeats).
    pub fn num_rows(&self) -> usize {
        self.rows
    }

    pub fn dtype_width(&self) -> usize {
        self.dtype_width
    }

    pub fn blocks(&self) -> &[Arc<SliceBlock>] {
        &self.blocks
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().flat_map(|b| b.indices.iter().copied())
    }

    /// Stored rows in order as `(index, row)` pairs.
    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        let width = self.row_width;
        self.blocks.iter().flat_map(move |b| {
            b.indices
                .iter()
                .copied()
                .zip(b.values.chunks_exact(width.max(1)))
        })
    }

    pub fn row_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.row_width);
        for b in &self.blocks {
            out.extend_from_slice(&b.values);
        }
        out
    }

    /// Bytes of row payload, excluding index storage.
    pub fn nominal_byte_size(&self) -> u64 {
        (self.rows * self.row_width * self.dtype_width) as u64
    }

    pub fn index_byte_size(&self) -> u64 {
        (self.rows * INDEX_WIDTH) as u64
    }

    /// Row payload plus index storage: what a gather buffer must hold.
    pub fn buffer_byte_size(&self) -> u64 {
        self.nominal_byte_size() + self.index_byte_size()
    }

    pub(crate) fn from_blocks(
        dense_shape: Vec<usize>,
        blocks: Vec<Arc<SliceBlock>>,
        dtype_width: usize,
    ) -> Self {
        let row_width = dense_shape[1..].iter().product();
        let rows = blocks.iter().map(|b| b.indices.len()).sum();
        let blocks = blocks
            .into_iter()
            .filter(|b| !b.indices.is_empty())
            .collect();
        Self {
            dense_shape,
            row_width,
            rows,
            blocks,
            dtype_width,
        }
    }
}

impl PartialEq for SliceGrad {
    fn eq(&self, other: &Self) -> bool {
        self.dense_shape == other.dense_shape
            && self.dtype_width == other.dtype_width
            && self.rows == other.rows
            && self.indices().eq(other.indices())
            && self.rows().map(|(_, r)| r).eq(other.rows().map(|(_, r)| r))
    }
}

/// A gradient in either representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Grad {
    Dense(DenseGrad),
    Slices(SliceGrad),
}

impl Grad {
    pub fn dense_shape(&self) -> &[usize] {
        match self {
            Grad::Dense(d) => d.shape(),
            Grad::Slices(s) => s.dense_shape(),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Grad::Dense(_))
    }

    pub fn kind(&self) -> GradKind {
        match self {
            Grad::Dense(_) => GradKind::Dense,
            Grad::Slices(_) => GradKind::Slices,
        }
    }

    pub fn dtype_width(&self) -> usize {
        match self {
            Grad::Dense(d) => d.dtype_width(),
            Grad::Slices(s) => s.dtype_width(),
        }
    }

    pub fn nominal_byte_size(&self) -> u64 {
        match self {
            Grad::Dense(d) => d.nominal_byte_size(),
            Grad::Slices(s) => s.nominal_byte_size(),
        }
    }

    /// Stored axis-0 rows: the dense extent, or the slice row count.
    pub fn stored_rows(&self) -> usize {
        match self {
            Grad::Dense(d) => d.rows(),
            Grad::Slices(s) => s.num_rows(),
        }
    }
}

impl From<DenseGrad> for Grad {
    fn from(d: DenseGrad) -> Self {
        Grad::Dense(d)
    }
}

impl From<SliceGrad> for Grad {
    fn from(s: SliceGrad) -> Self {
        Grad::Slices(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradKind {
    Dense,
    Slices,
}

/// Name of a trainable variable.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VarId(String);

impl VarId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VarId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// One rank's gradients for one step, in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradBundle {
    entries: Vec<(VarId, Grad)>,
}

impl GradBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(VarId, Grad)>) -> Result<Self, TensorError> {
        let mut bundle = Self::new();
        for (id, g) in entries {
            bundle.push(id, g)?;
        }
        Ok(bundle)
    }

    pub fn push(&mut self, id: VarId, grad: impl Into<Grad>) -> Result<(), TensorError> {
        if self.get(&id).is_some() {
            return Err(TensorError::DuplicateVar(id));
        }
        self.entries.push((id, grad.into()));
        Ok(())
    }

    pub fn get(&self, id: &VarId) -> Option<&Grad> {
        self.entries.iter().find(|(v, _)| v == id).map(|(_, g)| g)
    }

    pub fn entries(&self) -> &[(VarId, Grad)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(VarId, Grad)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VarId, &Grad)> {
        self.entries.iter().map(|(v, g)| (v, g))
    }
}

/// Raw per-variable gradient contributions before local accumulation, as
/// produced by a backward pass where one variable may be reached through
/// several paths (e.g. a tied embedding/projection matrix).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepGrads {
    entries: Vec<(VarId, Vec<Grad>)>,
}

impl StepGrads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a contribution, creating the variable entry on first use.
    pub fn add(&mut self, id: VarId, grad: impl Into<Grad>) {
        let grad = grad.into();
        match self.entries.iter_mut().find(|(v, _)| *v == id) {
            Some((_, list)) => list.push(grad),
            None => self.entries.push((id, vec![grad])),
        }
    }

    pub fn entries(&self) -> &[(VarId, Vec<Grad>)] {
        &self.entries
    }

    pub fn contributions(&self, id: &VarId) -> Option<&[Grad]> {
        self.entries
            .iter()
            .find(|(v, _)| v == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Accumulates each variable's contributions locally with `rule`.
    /// Variables whose contribution list accumulates to the empty marker
    /// are dropped.
    pub fn accumulate(&self, rule: AccumulationRule) -> Result<GradBundle, TensorError> {
        let mut bundle = GradBundle::new();
        for (id, grads) in &self.entries {
            if let Some(g) = accumulate(rule, grads)?.into_grad() {
                bundle.push(id.clone(), g)?;
            }
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_rejects_bad_shapes() {
        assert!(matches!(
            DenseGrad::new(vec![], vec![]),
            Err(TensorError::InvalidShape(_))
        ));
        assert!(matches!(
            DenseGrad::new(vec![2, 0], vec![]),
            Err(TensorError::InvalidShape(_))
        ));
        assert_eq!(
            DenseGrad::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch {
                expected: 4,
                actual: 3
            })
        );
    }

    #[test]
    fn slice_rejects_out_of_range_index() {
        let err = SliceGrad::new(vec![3, 1], vec![0, 3], vec![1.0, 2.0]).unwrap_err();
        assert_eq!(err, TensorError::IndexOutOfRange { index: 3, rows: 3 });
    }

    #[test]
    fn slice_byte_sizes() {
        let s = SliceGrad::new(vec![10, 3], vec![1, 1, 4], vec![0.0; 9]).unwrap();
        assert_eq!(s.nominal_byte_size(), 3 * 3 * 4);
        assert_eq!(s.index_byte_size(), 3 * 8);
        assert_eq!(s.buffer_byte_size(), 36 + 24);
    }

    #[test]
    fn dense_byte_size_uses_nominal_width() {
        let d = DenseGrad::with_dtype_width(vec![4, 2], vec![0.0; 8], 2).unwrap();
        assert_eq!(d.nominal_byte_size(), 16);
        assert_eq!(
            DenseGrad::zeros(vec![4, 2]).unwrap().nominal_byte_size(),
            32
        );
    }

    #[test]
    fn full_coverage_slices_keep_every_row() {
        let d = DenseGrad::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = d.to_slices();
        assert_eq!(s.indices().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(s.row_values(), d.values());
    }

    #[test]
    fn bundle_rejects_duplicates() {
        let mut b = GradBundle::new();
        b.push("w".into(), DenseGrad::zeros(vec![1]).unwrap())
            .unwrap();
        let err = b
            .push("w".into(), DenseGrad::zeros(vec![1]).unwrap())
            .unwrap_err();
        assert_eq!(err, TensorError::DuplicateVar("w".into()));
    }

    #[test]
    fn one_dimensional_slices_have_unit_rows() {
        let s = SliceGrad::new(vec![5], vec![4, 0], vec![1.5, -2.0]).unwrap();
        assert_eq!(s.row_width(), 1);
        let rows: Vec<_> = s.rows().collect();
        assert_eq!(rows, vec![(4, &[1.5][..]), (0, &[-2.0][..])]);
    }
}
