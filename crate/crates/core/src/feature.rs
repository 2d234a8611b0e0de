use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense volume features indexed `(h, w, d, c)`, channel-last, row-major.
///
/// Every extent is at least one and every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap4D {
    tensor: Tensor,
}

impl FeatureMap4D {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        Self::from_tensor(Tensor::new(shape.to_vec(), data)?)
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "feature map must be 4D (H, W, D, C), got shape {shape:?}"
            )));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "feature map extents must be >= 1, got {shape:?}"
            )));
        }
        if let Some((index, value)) = tensor.first_non_finite() {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self { tensor })
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Result<Self> {
        Self::from_tensor(Tensor::full(&shape, value))
    }

    pub fn shape(&self) -> [usize; 4] {
        self.tensor.shape().try_into().unwrap()
    }

    pub fn channels(&self) -> usize {
        self.shape()[3]
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn get(&self, h: usize, w: usize, d: usize, c: usize) -> f64 {
        let [_, ws, ds, cs] = self.shape();
        self.tensor.data()[((h * ws + w) * ds + d) * cs + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent_and_nan() {
        assert!(FeatureMap4D::new([1, 0, 1, 1], vec![]).is_err());
        let err = FeatureMap4D::new([1, 1, 2, 1], vec![0.0, f64::INFINITY]).unwrap_err();
        match err {
            Error::NonFinite { index, .. } => assert_eq!(index, vec![0, 0, 1, 0]),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn indexing_is_channel_last() {
        let f = FeatureMap4D::new([2, 2, 2, 2], (0..16).map(f64::from).collect()).unwrap();
        assert_eq!(f.get(1, 0, 1, 1), 11.0);
    }
}
