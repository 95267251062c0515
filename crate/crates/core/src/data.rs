//! Labelled sample sets.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(N, ...)`; the first axis indexes samples.
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rank() < 2 || x.dim(0) != y.len() {
            return Err(shape_err!(
                "{} labels for samples of shape {:?}",
                y.len(),
                x.shape()
            ));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            x: Tensor::from_parts(shape, data),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn range(&self, start: usize, end: usize) -> Dataset {
        self.subset(&(start..end.min(self.len())).collect::<Vec<_>>())
    }
}
