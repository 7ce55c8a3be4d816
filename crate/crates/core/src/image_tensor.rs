//! Three-channel images with unit-interval intensities.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// RGB image stored channel-major as a `[3, H, W]` tensor with every value
/// finite and in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_tensor(Tensor::new(vec![CHANNELS, height, width], data)?)
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (c, h, w) = tensor.dims3()?;
        if c != CHANNELS || h == 0 || w == 0 {
            return Err(Error::shape("ImageTensor", format!("{:?}", tensor.shape())));
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite("ImageTensor"));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("image value {v} outside [0, 1]")));
        }
        Ok(ImageTensor { tensor })
    }

    /// Clamps every value into `[0, 1]`; returns the image and whether any
    /// value had to move. Non-finite input is still an error.
    pub fn from_tensor_clamped(tensor: Tensor) -> Result<(Self, bool)> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite("ImageTensor"));
        }
        let clamped = tensor.data().iter().any(|v| !(0.0..=1.0).contains(v));
        let image = Self::from_tensor(tensor.map(|v| v.clamp(0.0, 1.0)))?;
        Ok((image, clamped))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let plane = height * width;
        let data = (0..CHANNELS * plane)
            .map(|i| f(i / plane, (i % plane) / width, i % width))
            .collect();
        Self::new(height, width, data)
    }

    pub fn uniform(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    /// One channel as a row-major `H x W` slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.pixels();
        &self.tensor.data()[c * plane..(c + 1) * plane]
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

    pub fn same_size(&self, other: &ImageTensor) -> bool {
        self.height() == other.height() && self.width() == other.width()
    }
}

pub(crate) fn expect_same_size(op: &'static str, a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_nan() {
        assert!(ImageTensor::new(1, 1, vec![0.0, 1.0, 1.5]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, f64::NAN, 0.5]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, 1.0, 0.5]).is_ok());
    }

    #[test]
    fn clamped_constructor_flags() {
        let t = Tensor::new(vec![3, 1, 1], vec![-0.1, 0.5, 1.2]).unwrap();
        let (img, flag) = ImageTensor::from_tensor_clamped(t).unwrap();
        assert!(flag);
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn indexing_is_channel_major() {
        let img = ImageTensor::from_fn(2, 3, |c, y, x| (c * 100 + y * 10 + x) as f64 / 255.0).unwrap();
        assert_eq!(img.get(2, 1, 2), 212.0 / 255.0);
        assert_eq!(img.channel(1)[3], 110.0 / 255.0);
    }
}
