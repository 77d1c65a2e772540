//! Scalar intensity images on the same raster geometry as masks.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

/// Axis-aligned pixel rectangle: rows `[top, top+height)`, cols `[left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.height >= 1
            && self.width >= 1
            && self.top + self.height <= height
            && self.left + self.width <= width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image { height, width, values: vec![value; height * width] }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "image values length {} does not match {}x{}",
                values.len(),
                height,
                width
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(Image { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.width + c] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Paint a rectangle with a constant intensity.
    pub fn fill_rect(&mut self, rect: &Rect, value: f64) {
        for r in rect.top..rect.top + rect.height {
            for c in rect.left..rect.left + rect.width {
                self.set(r, c, value);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_overlap_detection() {
        let a = Rect { top: 0, left: 0, height: 4, width: 4 };
        let b = Rect { top: 3, left: 3, height: 2, width: 2 };
        let c = Rect { top: 4, left: 0, height: 2, width: 2 };
        assert!(a.overlaps(&b));
        assert!(!a.overlaps(&c));
    }

    #[test]
    fn image_rejects_bad_lengths() {
        assert!(Image::from_values(2, 2, vec![0.0; 3]).is_err());
        assert!(Image::from_values(2, 2, vec![f64::NAN; 4]).is_err());
    }
}
