//! 8-bit RGB rasters and binary masks shared across the pipeline.

use std::path::Path;

use tensorcore::Tensor;

use crate::error::{Result, ScreenError};
use crate::pnm;

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> RgbImage {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        RgbImage {
            width,
            height,
            pixels,
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<RgbImage> {
        if pixels.len() != 3 * width * height {
            return Err(ScreenError::Validation(format!(
                "pixel buffer length {} does not match {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RgbImage> {
        if x + w > self.width || y + h > self.height {
            return Err(ScreenError::Validation(format!(
                "crop {}x{}+{}+{} outside {}x{}",
                w, h, x, y, self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(3 * w * h);
        for row in y..y + h {
            let start = 3 * (row * self.width + x);
            pixels.extend_from_slice(&self.pixels[start..start + 3 * w]);
        }
        RgbImage::from_pixels(w, h, pixels)
    }

    /// Paste `src` with its top-left corner at (x, y); must fit.
    pub fn paste(&mut self, src: &RgbImage, x: usize, y: usize) {
        assert!(x + src.width <= self.width && y + src.height <= self.height);
        for row in 0..src.height {
            let dst_start = 3 * ((y + row) * self.width + x);
            let src_start = 3 * (row * src.width);
            self.pixels[dst_start..dst_start + 3 * src.width]
                .copy_from_slice(&src.pixels[src_start..src_start + 3 * src.width]);
        }
    }

    /// Bilinear resize with align-corners mapping (corners map to corners).
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> RgbImage {
        if new_w == self.width && new_h == self.height {
            return self.clone();
        }
        let sx = if new_w > 1 {
            (self.width - 1) as f64 / (new_w - 1) as f64
        } else {
            0.0
        };
        let sy = if new_h > 1 {
            (self.height - 1) as f64 / (new_h - 1) as f64
        } else {
            0.0
        };
        let mut pixels = vec![0u8; 3 * new_w * new_h];
        for oy in 0..new_h {
            let fy = oy as f64 * sy;
            let y0 = (fy.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let dy = fy - y0 as f64;
            for ox in 0..new_w {
                let fx = ox as f64 * sx;
                let x0 = (fx.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let dx = fx - x0 as f64;
                for c in 0..3 {
                    let p00 = self.pixels[3 * (y0 * self.width + x0) + c] as f64;
                    let p01 = self.pixels[3 * (y0 * self.width + x1) + c] as f64;
                    let p10 = self.pixels[3 * (y1 * self.width + x0) + c] as f64;
                    let p11 = self.pixels[3 * (y1 * self.width + x1) + c] as f64;
                    let v = (1.0 - dy) * ((1.0 - dx) * p00 + dx * p01)
                        + dy * ((1.0 - dx) * p10 + dx * p11);
                    pixels[3 * (oy * new_w + ox) + c] = (v + 0.5).floor() as u8;
                }
            }
        }
        RgbImage {
            width: new_w,
            height: new_h,
            pixels,
        }
    }

    /// Separable Gaussian blur with clamp-to-edge borders; kernel radius 3σ.
    pub fn gaussian_blur(&self, sigma: f64) -> RgbImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
        let mut sum = 0.0;
        for i in -radius..=radius {
            let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
            kernel.push(v);
            sum += v;
        }
        for v in &mut kernel {
            *v /= sum;
        }

        let (w, h) = (self.width as isize, self.height as isize);
        // Horizontal pass into f64, then vertical back to u8.
        let mut mid = vec![0.0f64; 3 * self.width * self.height];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for (ki, kv) in kernel.iter().enumerate() {
                    let sxp = (x + ki as isize - radius).clamp(0, w - 1);
                    let base = 3 * (y * w + sxp) as usize;
                    for c in 0..3 {
                        acc[c] += kv * self.pixels[base + c] as f64;
                    }
                }
                let base = 3 * (y * w + x) as usize;
                mid[base..base + 3].copy_from_slice(&acc);
            }
        }
        let mut pixels = vec![0u8; 3 * self.width * self.height];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for (ki, kv) in kernel.iter().enumerate() {
                    let syp = (y + ki as isize - radius).clamp(0, h - 1);
                    let base = 3 * (syp * w + x) as usize;
                    for c in 0..3 {
                        acc[c] += kv * mid[base + c];
                    }
                }
                let base = 3 * (y * w + x) as usize;
                for c in 0..3 {
                    pixels[base + c] = (acc[c] + 0.5).floor().clamp(0.0, 255.0) as u8;
                }
            }
        }
        RgbImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    /// NCHW tensor `[1, 3, h, w]` with channel values scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = self.pixels[3 * i + c] as f64 / 255.0;
            }
        }
        Tensor::from_vec([1, 3, self.height, self.width], data).expect("shape")
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        pnm::write_ppm(path, self.width, self.height, &self.pixels)
    }

    pub fn load_ppm(path: &Path) -> Result<RgbImage> {
        let (w, h, pixels) = pnm::read_ppm(path)?;
        RgbImage::from_pixels(w, h, pixels)
    }
}

/// Binary raster aligned to a slide level.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    level: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, level: u32) -> BinaryMask {
        BinaryMask {
            width,
            height,
            level,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, level: u32, bits: Vec<bool>) -> Result<BinaryMask> {
        if bits.len() != width * height {
            return Err(ScreenError::Validation(format!(
                "mask bit count {} does not match {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            level,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(&a, &b)| !a || b)
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Count of set pixels inside the half-open rectangle, clipped to bounds.
    pub fn count_in_rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> usize {
        let x1 = x1.min(self.width);
        let y1 = y1.min(self.height);
        let mut n = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                n += self.bits[y * self.width + x] as usize;
            }
        }
        n
    }

    pub fn save_pbm(&self, path: &Path) -> Result<()> {
        pnm::write_pbm(path, self.width, self.height, &self.bits)
    }

    pub fn load_pbm(path: &Path, level: u32) -> Result<BinaryMask> {
        let (w, h, bits) = pnm::read_pbm(path)?;
        BinaryMask::from_bits(w, h, level, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_preserves_corners() {
        let mut img = RgbImage::filled(4, 4, [0, 0, 0]);
        img.set(0, 0, [10, 20, 30]);
        img.set(3, 3, [200, 100, 50]);
        let big = img.resize_bilinear(9, 9);
        assert_eq!(big.get(0, 0), [10, 20, 30]);
        assert_eq!(big.get(8, 8), [200, 100, 50]);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = RgbImage::filled(5, 3, [77, 88, 99]);
        let out = img.resize_bilinear(12, 20);
        for y in 0..20 {
            for x in 0..12 {
                assert_eq!(out.get(x, y), [77, 88, 99]);
            }
        }
    }

    #[test]
    fn blur_preserves_constant_and_smooths_edge() {
        let mut img = RgbImage::filled(16, 16, [200, 200, 200]);
        assert_eq!(img.gaussian_blur(2.0), img);
        for y in 0..16 {
            for x in 0..8 {
                img.set(x, y, [0, 0, 0]);
            }
        }
        let blurred = img.gaussian_blur(2.0);
        let edge = blurred.get(8, 8)[0];
        assert!(edge > 20 && edge < 180, "edge value {}", edge);
    }

    #[test]
    fn mask_rect_count_and_subset() {
        let mut a = BinaryMask::new(8, 8, 0);
        for i in 2..6 {
            a.set(i, 3, true);
        }
        assert_eq!(a.count_ones(), 4);
        assert_eq!(a.count_in_rect(0, 0, 8, 8), 4);
        assert_eq!(a.count_in_rect(3, 3, 5, 4), 2);
        let mut b = a.clone();
        b.set(0, 0, true);
        assert!(a.is_subset_of(&b));
        assert!(!b.is_subset_of(&a));
    }

    #[test]
    fn tensor_conversion_scales_channels() {
        let mut img = RgbImage::filled(2, 1, [0, 0, 0]);
        img.set(1, 0, [255, 51, 0]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data()[1], 1.0); // R channel, second pixel
        assert!((t.data()[3] - 0.2).abs() < 1e-12); // G channel, second pixel
    }
}
