//! Single-channel page images and the pixel operations the pipeline needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Grayscale image with intensities in `[0, 1]` (1 = white paper).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        if x < self.width && y < self.height {
            self.data[y * self.width + x] = v;
        }
    }

    /// Darken pixel `(x, y)` to at most `v`.
    pub fn ink(&mut self, x: isize, y: isize, v: f64) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let p = &mut self.data[y as usize * self.width + x as usize];
            *p = p.min(v);
        }
    }

    pub fn fill_rect(&mut self, x0: isize, y0: isize, x1: isize, y1: isize, v: f64) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.ink(x, y, v);
            }
        }
    }

    /// Straight segment by DDA stepping.
    pub fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, v: f64) {
        let steps = libm::ceil((x1 - x0).abs().max((y1 - y0).abs())).max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = libm::round(x0 + (x1 - x0) * t) as isize;
            let y = libm::round(y0 + (y1 - y0) * t) as isize;
            self.ink(x, y, v);
        }
    }

    /// Rectangle outline; with `dash > 0` every other run of `dash` pixels is skipped.
    pub fn outline(&mut self, b: &BBox, v: f64, dash: usize) {
        let (x0, y0) = (libm::round(b.x1) as isize, libm::round(b.y1) as isize);
        let (x1, y1) = (libm::round(b.x2) as isize - 1, libm::round(b.y2) as isize - 1);
        let on = |i: isize| dash == 0 || (i / dash as isize) % 2 == 0;
        for x in x0..=x1 {
            if on(x - x0) {
                self.ink(x, y0, v);
                self.ink(x, y1, v);
            }
        }
        for y in y0..=y1 {
            if on(y - y0) {
                self.ink(x0, y, v);
                self.ink(x1, y, v);
            }
        }
    }

    /// Bilinear resize (pixel-centre aligned).
    pub fn resize(&self, width: usize, height: usize) -> Self {
        let mut out = Self::new(width, height, 0.0);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                out.data[y * width + x] =
                    crate::deform::bilinear(&self.data, self.height, self.width, fy, fx);
            }
        }
        out
    }

    /// Scale by `factor` (each side rounded, at least 1 pixel).
    pub fn rescale(&self, factor: f64) -> Self {
        let w = (libm::round(self.width as f64 * factor) as usize).max(1);
        let h = (libm::round(self.height as f64 * factor) as usize).max(1);
        if w == self.width && h == self.height {
            return self.clone();
        }
        self.resize(w, h)
    }

    /// Fit into `width × height` keeping the aspect ratio, padding the
    /// right/bottom with white. Returns the image and the applied scale.
    pub fn letterbox(&self, width: usize, height: usize) -> (Self, f64) {
        let k = (width as f64 / self.width as f64).min(height as f64 / self.height as f64);
        if self.width == width && self.height == height {
            return (self.clone(), 1.0);
        }
        let w = (libm::round(self.width as f64 * k) as usize).clamp(1, width);
        let h = (libm::round(self.height as f64 * k) as usize).clamp(1, height);
        let scaled = self.resize(w, h);
        let mut out = Self::new(width, height, 1.0);
        for y in 0..h {
            out.data[y * width..y * width + w].copy_from_slice(&scaled.data[y * w..(y + 1) * w]);
        }
        (out, k)
    }

    /// Network input: `[1 × H × W]` ink density (`1 − intensity`).
    pub fn to_input(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.data.iter().map(|v| 1.0 - v).collect()).unwrap()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letterbox_keeps_aspect() {
        let img = GrayImage::new(100, 50, 0.0);
        let (out, k) = img.letterbox(60, 60);
        assert_eq!((out.width, out.height), (60, 60));
        assert!((k - 0.6).abs() < 1e-12);
        assert_eq!(out.get(10, 10), 0.0);
        assert_eq!(out.get(10, 40), 1.0);
    }

    #[test]
    fn resize_constant_is_constant() {
        let img = GrayImage::new(7, 5, 0.25);
        let r = img.resize(13, 3);
        assert!(r.data.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn u8_roundtrip() {
        let img = GrayImage::from_u8(2, 1, &[0, 255]);
        assert_eq!(img.to_u8(), [0, 255]);
    }
}
