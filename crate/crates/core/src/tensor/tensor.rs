//! The dense tensor value type.

use crate::error::{Error, Result};

/// A dense multi-dimensional array of `f64` values, row-major.
///
/// Scalars have an empty shape, vectors `[n]`, matrices `[rows, cols]`.
/// A tensor with `requires_grad` set acts as a trainable leaf when
/// inserted into a [`super::Graph`]; after backward its `grad` holds the
/// accumulated gradient in the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {:?} needs {} values, got {}",
                    shape,
                    expect,
                    values.len()
                ),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("zero dimension in {shape:?}"),
            ));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            values: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::invalid("tensor", "matrix needs at least one row"));
        }
        let c = rows[0].len();
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::invalid("tensor", "ragged rows in matrix"));
            }
            values.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, x: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![x; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.values.len());
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extract the single value of a scalar (or any one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            ));
        }
        Ok(self.values[0])
    }

    /// Number of rows for rank-2, or 1 for rank ≤ 1.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Entry of a rank-2 tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.values[r * self.shape[1] + c]
    }

    /// One row of a rank-2 tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.values[r * c..(r + 1) * c]
    }

    /// Copy selected rows of a rank-2 tensor into a new rank-2 tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::invalid("select_rows", "expects a rank-2 tensor"));
        }
        let c = self.shape[1];
        let mut values = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::invalid(
                    "select_rows",
                    format!("row {r} out of range"),
                ));
            }
            values.extend_from_slice(self.row(r));
        }
        Tensor::new(vec![rows.len(), c], values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Elementwise maximum absolute difference; error on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
