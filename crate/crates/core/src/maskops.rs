//! Binary masks and mask-level geometry: IoU, boundary bands, boundary IoU.
//!
//! Masks are dense row-major bitsets over an `H x W` raster. All operations
//! are pure functions; empty-vs-empty IoU is defined as 1.0 (two empty
//! predictions agree perfectly) and empty-vs-nonempty as 0.

use crate::error::{Error, Result};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Binary occupancy grid, one bool per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Masks serialize as their text format (`"H W\n010...\n..."`) so every
/// persisted document carries them in the same representation.
impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_text())
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Mask::from_text(&text).map_err(D::Error::custom)
    }
}

/// Width in pixels of the boundary band used for boundary IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandWidth(pub usize);

impl BandWidth {
    /// Default band width for a raster: 2% of the diagonal, at least 1 px.
    pub fn for_raster(height: usize, width: usize) -> Self {
        let diag = ((height * height + width * width) as f64).sqrt();
        BandWidth(((0.02 * diag).round() as usize).max(1))
    }
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "mask must have positive dims");
        Mask { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "mask must have positive dims");
        Mask { height, width, bits: vec![true; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask bits length {} does not match {}x{}",
                bits.len(),
                height,
                width
            )));
        }
        Ok(Mask { height, width, bits })
    }

    /// Rectangle mask covering rows `[top, top+h)` and cols `[left, left+w)`.
    pub fn from_rect(height: usize, width: usize, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut m = Mask::empty(height, width);
        for r in top..(top + h).min(height) {
            for c in left..(left + w).min(width) {
                m.set(r, c, true);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Serialize to the text format: first line `H W`, then `H` lines of
    /// `W` characters from `{0,1}`.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.height * (self.width + 1) + 16);
        s.push_str(&format!("{} {}\n", self.height, self.width));
        for r in 0..self.height {
            for c in 0..self.width {
                s.push(if self.get(r, c) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty mask text".into()))?;
        let mut parts = header.split_whitespace();
        let height: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::Format("bad mask header".into()))?;
        let width: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::Format("bad mask header".into()))?;
        let mut bits = Vec::with_capacity(height * width);
        for _ in 0..height {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("truncated mask text".into()))?;
            if line.len() != width {
                return Err(Error::Format(format!(
                    "mask row has {} chars, expected {}",
                    line.len(),
                    width
                )));
            }
            for ch in line.chars() {
                match ch {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    _ => return Err(Error::Format(format!("bad mask char {ch:?}"))),
                }
            }
        }
        Mask::from_bits(height, width, bits)
    }
}

fn check_same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Intersection and union pixel counts.
pub fn intersection_union(a: &Mask, b: &Mask) -> Result<(usize, usize)> {
    check_same_shape(a, b)?;
    let mut inter = 0usize;
    let mut uni = 0usize;
    for (x, y) in a.bits.iter().zip(&b.bits) {
        if *x && *y {
            inter += 1;
        }
        if *x || *y {
            uni += 1;
        }
    }
    Ok((inter, uni))
}

/// Intersection over union. Two empty masks have IoU 1.0.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, uni) = intersection_union(a, b)?;
    if uni == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / uni as f64)
}

/// Inner boundary band: set pixels whose Chebyshev distance to the nearest
/// background pixel is at most `w`. The image border counts as background.
pub fn boundary_band(m: &Mask, w: BandWidth) -> Mask {
    assert!(w.0 >= 1, "band width must be >= 1");
    let (h, wd) = (m.height, m.width);
    let mut band = Mask::empty(h, wd);
    let r = w.0 as isize;
    for row in 0..h {
        for col in 0..wd {
            if !m.get(row, col) {
                continue;
            }
            // A set pixel is in the band iff some pixel in its L-inf ball of
            // radius w is background or lies outside the grid.
            let mut near_background = false;
            'scan: for dr in -r..=r {
                for dc in -r..=r {
                    let rr = row as isize + dr;
                    let cc = col as isize + dc;
                    if rr < 0 || rr >= h as isize || cc < 0 || cc >= wd as isize {
                        near_background = true;
                        break 'scan;
                    }
                    if !m.get(rr as usize, cc as usize) {
                        near_background = true;
                        break 'scan;
                    }
                }
            }
            if near_background {
                band.set(row, col, true);
            }
        }
    }
    band
}

/// IoU between the boundary bands of the two masks.
pub fn boundary_iou(a: &Mask, b: &Mask, w: BandWidth) -> Result<f64> {
    check_same_shape(a, b)?;
    iou(&boundary_band(a, w), &boundary_band(b, w))
}
