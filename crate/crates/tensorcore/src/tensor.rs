use crate::{Scalar, TensorError};

/// Dense row-major array. Batched activations use a leading batch axis and
/// NHWC layout for images.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Decode(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading-axis length.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of values per leading-axis entry.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Decode(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates two batched matrices along the feature axis.
    pub fn concat_cols(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if a.batch() != b.batch() {
            return Err(TensorError::Decode(format!(
                "concat: batch {} vs {}",
                a.batch(),
                b.batch()
            )));
        }
        let (wa, wb) = (a.row_len(), b.row_len());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..a.batch() {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Ok(Tensor {
            shape: vec![a.batch(), wa + wb],
            data,
        })
    }

    /// Splits a batched matrix into its first `left` columns and the rest.
    pub fn split_cols(&self, left: usize) -> (Tensor<T>, Tensor<T>) {
        let w = self.row_len();
        let b = self.batch();
        let mut l = Vec::with_capacity(b * left);
        let mut r = Vec::with_capacity(b * (w - left));
        for i in 0..b {
            let row = self.row(i);
            l.extend_from_slice(&row[..left]);
            r.extend_from_slice(&row[left..]);
        }
        (
            Tensor {
                shape: vec![b, left],
                data: l,
            },
            Tensor {
                shape: vec![b, w - left],
                data: r,
            },
        )
    }
}
