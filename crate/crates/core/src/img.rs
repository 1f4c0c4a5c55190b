//! Dense float images in row-major `H × W × C` layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Contract(format!(
                "image buffer has {} values, expected {width}×{height}×{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::filled(self.width, self.height, self.channels, 0.0)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "image shapes differ: {}×{}×{} vs {}×{}×{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Multiplies every channel by a single-channel mask of the same size.
    pub fn masked(&self, mask: &Mask) -> Image {
        let mut out = self.clone();
        for (px, m) in out.data.chunks_mut(self.channels).zip(&mask.data) {
            for v in px {
                *v *= m;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..self.clone()
        }
    }
}

/// Binary per-pixel mask stored as 0.0 / 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Contract("mask size does not match its dimensions".into()));
        }
        if data.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1.0; width * height],
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn inverted(&self) -> Mask {
        Mask {
            data: self.data.iter().map(|m| 1.0 - m).collect(),
            ..self.clone()
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|m| **m > 0.5).count()
    }

    pub fn check_shape(&self, img: &Image) -> Result<()> {
        if self.width == img.width && self.height == img.height {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "mask is {}×{}, image is {}×{}",
                self.width, self.height, img.width, img.height
            )))
        }
    }
}
