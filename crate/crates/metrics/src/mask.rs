use crate::{MetricsError, Result};

/// Binary mask on the image grid, stored row-major with values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(MetricsError::BadLength {
                len: data.len(),
                height,
                width,
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(MetricsError::NotBinary { index, value });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Binarizes a probability-like map with a strict `> threshold` test.
    pub fn from_scores(height: usize, width: usize, scores: &[f32], threshold: f32) -> Result<Self> {
        if scores.len() != height * width {
            return Err(MetricsError::BadLength {
                len: scores.len(),
                height,
                width,
            });
        }
        Ok(Self {
            height,
            width,
            data: scores.iter().map(|&s| u8::from(s > threshold)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = u8::from(on);
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// (row, col) coordinates of every positive pixel in row-major order.
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(MetricsError::ShapeMismatch {
                lhs_h: self.height,
                lhs_w: self.width,
                rhs_h: other.height,
                rhs_w: other.width,
            });
        }
        Ok(())
    }
}
