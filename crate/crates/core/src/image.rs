//! 8-bit raster images and conversion to/from the model's pixel space.

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image with {} bytes",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: color.repeat(width * height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&c);
    }

    pub fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, c: [u8; 3]) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.put(xx, yy, c);
            }
        }
    }

    /// Pixel values mapped from [0, 255] to [−1, 1], HWC order.
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v) / 127.5 - 1.0).collect()
    }

    /// Inverse of [`to_unit`](Self::to_unit), clamping to [−1, 1] and rounding.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let data = values
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect();
        Self::new(width, height, data)
    }
}

/// 8-bit single-channel image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} gray image with {} bytes",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Rearranges HWC pixels into one row per patch (raster order), each row
/// holding `patch·patch·channels` values in (dy, dx, channel) order.
pub fn patchify(values: &[f64], width: usize, height: usize, channels: usize, patch: usize) -> Vec<f64> {
    let (gw, gh) = (width / patch, height / patch);
    let mut out = Vec::with_capacity(values.len());
    for r in 0..gh {
        for c in 0..gw {
            for dy in 0..patch {
                let y = r * patch + dy;
                let start = (y * width + c * patch) * channels;
                out.extend_from_slice(&values[start..start + patch * channels]);
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f64], width: usize, height: usize, channels: usize, patch: usize) -> Vec<f64> {
    let (gw, gh) = (width / patch, height / patch);
    let mut out = vec![0.0; width * height * channels];
    let row_len = patch * channels;
    let mut src = 0;
    for r in 0..gh {
        for c in 0..gw {
            for dy in 0..patch {
                let y = r * patch + dy;
                let start = (y * width + c * patch) * channels;
                out[start..start + row_len].copy_from_slice(&patches[src..src + row_len]);
                src += row_len;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_roundtrip() {
        let img = RgbImage::new(2, 1, vec![0, 128, 255, 1, 2, 3]).unwrap();
        let back = RgbImage::from_unit(2, 1, &img.to_unit()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn from_unit_clamps() {
        let img = RgbImage::from_unit(1, 1, &[-3.0, 0.0, 7.0]).unwrap();
        assert_eq!(img.data(), &[0, 128, 255]);
    }

    #[test]
    fn patch_roundtrip() {
        let vals: Vec<f64> = (0..8 * 4 * 3).map(f64::from).collect();
        let p = patchify(&vals, 8, 4, 3, 2);
        // first patch row = pixel (0,0),(1,0) channels
        assert_eq!(&p[..6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(&p[6..12], &vals[24..30]);
        assert_eq!(unpatchify(&p, 8, 4, 3, 2), vals);
    }
}
