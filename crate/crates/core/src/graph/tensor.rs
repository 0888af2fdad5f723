use serde::{Deserialize, Serialize};

/// Dense row-major `f64` array with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected CHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn rc(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Channel `c` of a CHW tensor as a row-major slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let (_, h, w) = self.chw();
        &self.data[c * h * w..(c + 1) * h * w]
    }
}
