use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Row-major RGB image with channel-last layout and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::domain(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("image values must lie in [0,1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(
            vec![self.height as u32, self.width as u32, CHANNELS as u32],
            &self.data,
        )
        .expect("image shape is consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.expect_rank(3)?;
        if dims[2] != CHANNELS {
            return Err(Error::format(format!(
                "expected 3 channels, found {}",
                dims[2]
            )));
        }
        Self::new(dims[0], dims[1], t.to_f64())
    }
}
