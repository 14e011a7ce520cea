use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major binary map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

/// Axis-aligned box with exclusive upper corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    /// `max(height, width)`, the scale used for stage assignment.
    pub fn scale(&self) -> usize {
        self.width().max(self.height())
    }

    pub fn intersects(&self, other: &BBox, margin: usize) -> bool {
        self.x0 < other.x1 + margin
            && other.x0 < self.x1 + margin
            && self.y0 < other.y1 + margin
            && other.y0 < self.y1 + margin
    }
}

/// Uncompressed run-length encoding: alternating run lengths in row-major
/// order, starting with a (possibly empty) run of unset pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rle {
    pub counts: Vec<u32>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding box, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let e = b.get_or_insert(BBox {
                        x0: x,
                        y0: y,
                        x1: x + 1,
                        y1: y + 1,
                    });
                    e.x0 = e.x0.min(x);
                    e.y0 = e.y0.min(y);
                    e.x1 = e.x1.max(x + 1);
                    e.y1 = e.y1.max(y + 1);
                }
            }
        }
        b
    }

    /// Mean `(x, y)` of set pixels.
    pub fn mass_center(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Nearest-neighbour downsampling by an integer factor; output pixel `i`
    /// samples input pixel `floor((i + 0.5) * factor)`.
    pub fn downsample_nearest(&self, factor: usize) -> Mask {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Mask::new(h, w);
        for y in 0..h {
            let sy = ((y as f64 + 0.5) * factor as f64) as usize;
            for x in 0..w {
                let sx = ((x as f64 + 0.5) * factor as f64) as usize;
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Mask {
        let mut out = Mask::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Rle { counts }
    }

    pub fn from_rle(rle: &Rle, height: usize, width: usize) -> Result<Mask> {
        let mut bits = Vec::with_capacity(height * width);
        let mut value = false;
        for &c in &rle.counts {
            bits.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        if bits.len() != height * width {
            return Err(Error::Data(format!(
                "mask RLE covers {} pixels, expected {}",
                bits.len(),
                height * width
            )));
        }
        Ok(Mask {
            height,
            width,
            bits,
        })
    }
}

/// Row-major integer label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// `(label, run length)` pairs in row-major order.
    pub fn to_runs(&self) -> Vec<(u16, u32)> {
        let mut runs: Vec<(u16, u32)> = Vec::new();
        for &l in &self.labels {
            match runs.last_mut() {
                Some((v, n)) if *v == l => *n += 1,
                _ => runs.push((l, 1)),
            }
        }
        runs
    }

    pub fn from_runs(runs: &[(u16, u32)], height: usize, width: usize) -> Result<Self> {
        let mut labels = Vec::with_capacity(height * width);
        for &(v, n) in runs {
            labels.extend(std::iter::repeat_n(v, n as usize));
        }
        if labels.len() != height * width {
            return Err(Error::Data(format!(
                "label runs cover {} pixels, expected {}",
                labels.len(),
                height * width
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn mask_of(&self, label: u16) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| l == label).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_handles_leading_set_pixel() {
        let mut m = Mask::new(2, 3);
        m.set(0, 0, true);
        m.set(2, 1, true);
        let rle = m.to_rle();
        assert_eq!(rle.counts, vec![0, 1, 4, 1]);
        assert_eq!(Mask::from_rle(&rle, 2, 3).unwrap(), m);
    }

    #[test]
    fn rle_length_mismatch_is_rejected() {
        let rle = Rle { counts: vec![3, 2] };
        assert!(Mask::from_rle(&rle, 2, 3).is_err());
    }

    #[test]
    fn bbox_and_center_of_block() {
        let mut m = Mask::new(8, 8);
        for y in 2..5 {
            for x in 1..4 {
                m.set(x, y, true);
            }
        }
        let b = m.bbox().unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (1, 2, 4, 5));
        assert_eq!(m.mass_center(), Some((2.0, 3.0)));
        assert_eq!(Mask::new(3, 3).bbox(), None);
    }

    #[test]
    fn nearest_downsample_samples_pixel_centres() {
        let mut m = Mask::new(8, 8);
        m.set(2, 2, true);
        m.set(6, 2, true);
        let d = m.downsample_nearest(4);
        assert_eq!(d.bits, vec![true, true, false, false]);
    }
}
