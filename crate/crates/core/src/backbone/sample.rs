use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image volume with its binary lesion label.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    /// Intensity-normalised image, shape `(H, W, D)`.
    pub image: Tensor,
    /// Lesion mask with entries exactly 0 or 1, shape `(H, W, D)`.
    pub label: Tensor,
    /// Millimetres per voxel along `(H, W, D)`.
    pub spacing: [f64; 3],
    pub sample_id: String,
}

impl VolumeSample {
    pub fn new(image: Tensor, label: Tensor, spacing: [f64; 3], sample_id: String) -> Result<Self> {
        let s = Self {
            image,
            label,
            spacing,
            sample_id,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.shape().len() != 3 {
            return Err(Error::InvalidInput(format!(
                "{}: image must be 3D, got {:?}",
                self.sample_id,
                self.image.shape()
            )));
        }
        if self.image.shape() != self.label.shape() {
            return Err(Error::ShapeMismatch {
                context: "image vs label",
                expected: self.image.shape().to_vec(),
                actual: self.label.shape().to_vec(),
            });
        }
        if let Some(i) = self.label.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput(format!(
                "{}: label value {} at flat index {i} is not binary",
                self.sample_id,
                self.label.data()[i]
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.image.shape().try_into().unwrap()
    }

    pub fn lesion_fraction(&self) -> f64 {
        self.label.sum() / self.label.len() as f64
    }

    /// Zero-pads image and label at the high end of each axis up to a
    /// multiple of `multiple`.
    pub fn padded_to(&self, multiple: usize) -> Self {
        let [h, w, d] = self.shape();
        let up = |n: usize| n.div_ceil(multiple) * multiple;
        let (ph, pw, pd) = (up(h), up(w), up(d));
        if (ph, pw, pd) == (h, w, d) {
            return self.clone();
        }
        let pad = |t: &Tensor| {
            let mut out = Tensor::zeros(&[ph, pw, pd]);
            for x in 0..h {
                for y in 0..w {
                    let src = (x * w + y) * d;
                    let dst = (x * pw + y) * pd;
                    out.data_mut()[dst..dst + d].copy_from_slice(&t.data()[src..src + d]);
                }
            }
            out
        };
        Self {
            image: pad(&self.image),
            label: pad(&self.label),
            spacing: self.spacing,
            sample_id: self.sample_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PointLabel {
    Background,
    Foreground,
}

impl From<PointLabel> for u8 {
    fn from(l: PointLabel) -> u8 {
        match l {
            PointLabel::Background => 0,
            PointLabel::Foreground => 1,
        }
    }
}

impl TryFrom<u8> for PointLabel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(PointLabel::Background),
            1 => Ok(PointLabel::Foreground),
            other => Err(format!("point label must be 0 or 1, got {other}")),
        }
    }
}

/// A point prompt in voxel coordinates; `x`, `y`, `z` index the `H`, `W`, `D`
/// axes respectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub label: PointLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub points: Vec<PromptPoint>,
    pub sample_id: String,
}

impl PromptSet {
    pub fn new(points: Vec<PromptPoint>, sample_id: impl Into<String>) -> Self {
        Self {
            points,
            sample_id: sample_id.into(),
        }
    }

    pub fn validate(&self, extent: [usize; 3]) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{}: prompt set is empty",
                self.sample_id
            )));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.x >= extent[0] || p.y >= extent[1] || p.z >= extent[2] {
                return Err(Error::InvalidInput(format!(
                    "{}: prompt point {i} at ({}, {}, {}) lies outside volume {extent:?}",
                    self.sample_id, p.x, p.y, p.z
                )));
            }
        }
        if !self.points.iter().any(|p| p.label == PointLabel::Foreground) {
            return Err(Error::InvalidInput(format!(
                "{}: prompt set has no foreground point",
                self.sample_id
            )));
        }
        Ok(())
    }
}
