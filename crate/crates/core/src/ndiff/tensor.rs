use serde::{Deserialize, Serialize};

use super::NdiffError;

/// Dense row-major array of rank 1 or 2.
///
/// `requires_grad` marks leaves whose gradient the graph should report;
/// `grad` is filled in by [`Graph::backward`](super::Graph::backward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NdiffError> {
        if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
            return Err(NdiffError::InvalidShape { shape });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NdiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NdiffError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, NdiffError> {
        Self::new(vec![data.len()], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, NdiffError> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self, NdiffError> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NdiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NdiffError::InvalidArgument(
                "ragged rows in matrix literal".into(),
            ));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns, with a rank-1 tensor viewed as a single row.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank is validated at construction"),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (_, c) = self.dims();
        self.data[row * c + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let (_, c) = self.dims();
        &self.data[row * c..(row + 1) * c]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64, NdiffError> {
        if self.data.len() != 1 {
            return Err(NdiffError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }
}
