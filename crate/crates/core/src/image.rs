//! In-memory RGB images (CHW `f64` in `[0, 1]`) plus the pixel-level
//! transforms backing the consistency check.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Channel-major: `data[c * h * w + y * w + x]`, 3 channels.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; 3 * width * height],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[c * self.height * self.width + y * self.width + x] = v;
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != 3 * self.width * self.height {
            return Err(Error::data("image buffer size mismatch"));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("image contains non-finite pixels"));
        }
        Ok(())
    }

    /// Exact horizontal mirror.
    pub fn hflip(&self) -> Image {
        let mut out = Image::new(self.width, self.height);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Bilinear resize by a positive scale factor. Output dimensions round to
    /// the nearest pixel and are at least 1.
    pub fn resize_by(&self, factor: f64) -> Result<Image> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::config(format!("resize factor {factor} must be > 0")));
        }
        let nw = ((self.width as f64 * factor).round() as usize).max(1);
        let nh = ((self.height as f64 * factor).round() as usize).max(1);
        let mut out = Image::new(nw, nh);
        let sx = self.width as f64 / nw as f64;
        let sy = self.height as f64 / nh as f64;
        for c in 0..3 {
            for y in 0..nh {
                // Sample at destination pixel centers mapped into source space.
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, self.height as f64 - 1.0);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let wy = fy - y0 as f64;
                for x in 0..nw {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, self.width as f64 - 1.0);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let wx = fx - x0 as f64;
                    let v = self.get(c, y0, x0) * (1.0 - wy) * (1.0 - wx)
                        + self.get(c, y0, x1) * (1.0 - wy) * wx
                        + self.get(c, y1, x0) * wy * (1.0 - wx)
                        + self.get(c, y1, x1) * wy * wx;
                    out.set(c, y, x, v);
                }
            }
        }
        Ok(out)
    }
}
