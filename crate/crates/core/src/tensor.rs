use ndarray::{Array4, ArrayView4};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batched activations laid out as `(batch, channels, height, width)`.
///
/// `tracks_gradient` is false for consistency targets, which are used as
/// constants and never receive a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    values: Array4<T>,
    tracks_gradient: bool,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Array4<T>) -> Self {
        Self { values, tracks_gradient: true }
    }

    pub fn constant(values: Array4<T>) -> Self {
        Self { values, tracks_gradient: false }
    }

    pub fn detach(mut self) -> Self {
        self.tracks_gradient = false;
        self
    }

    pub fn tracks_gradient(&self) -> bool {
        self.tracks_gradient
    }

    pub fn values(&self) -> ArrayView4<'_, T> {
        self.values.view()
    }

    pub fn as_array(&self) -> &Array4<T> {
        &self.values
    }

    pub fn into_values(self) -> Array4<T> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    pub fn batch(&self) -> usize {
        self.values.dim().0
    }

    pub fn channels(&self) -> usize {
        self.values.dim().1
    }

    pub fn height(&self) -> usize {
        self.values.dim().2
    }

    pub fn width(&self) -> usize {
        self.values.dim().3
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn ensure_same_shape(expected: &[usize], got: &[usize]) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape(expected, got))
    }
}
