//! Grayscale images with precomputed gradients and bilinear sampling.

use nalgebra::Vector2;

use crate::error::{CalibError, Result};

/// Intensities in `[0, 1]` plus central-difference gradients per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub intensity: Vec<f32>,
    /// `(∂I/∂u, ∂I/∂v)` per pixel, one-sided at the border.
    pub gradient: Vec<[f32; 2]>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, intensity: Vec<f32>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(CalibError::invalid("image must be at least 2x2"));
        }
        if intensity.len() != width as usize * height as usize {
            return Err(CalibError::invalid("image buffer size mismatch"));
        }
        let mut img = Self {
            width,
            height,
            intensity,
            gradient: Vec::new(),
        };
        img.gradient = img.compute_gradient();
        Ok(img)
    }

    pub fn from_u8(width: u32, height: u32, data: &[u8]) -> Result<Self> {
        Self::new(width, height, data.iter().map(|v| *v as f32 / 255.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.intensity
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    fn compute_gradient(&self) -> Vec<[f32; 2]> {
        let (w, h) = (self.width as usize, self.height as usize);
        let at = |x: usize, y: usize| self.intensity[y * w + x];
        let mut g = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let gx = if x == 0 {
                    at(1, y) - at(0, y)
                } else if x == w - 1 {
                    at(w - 1, y) - at(w - 2, y)
                } else {
                    0.5 * (at(x + 1, y) - at(x - 1, y))
                };
                let gy = if y == 0 {
                    at(x, 1) - at(x, 0)
                } else if y == h - 1 {
                    at(x, h - 1) - at(x, h - 2)
                } else {
                    0.5 * (at(x, y + 1) - at(x, y - 1))
                };
                g.push([gx, gy]);
            }
        }
        g
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.intensity[(y * self.width + x) as usize] as f64
    }

    pub fn gradient_at(&self, x: u32, y: u32) -> Vector2<f64> {
        let g = self.gradient[(y * self.width + x) as usize];
        Vector2::new(g[0] as f64, g[1] as f64)
    }

    pub fn in_bounds(&self, p: &Vector2<f64>, margin: f64) -> bool {
        p.x >= margin
            && p.y >= margin
            && p.x <= self.width as f64 - 1.0 - margin
            && p.y <= self.height as f64 - 1.0 - margin
    }

    fn cell(&self, x: f64, y: f64) -> (usize, usize, f64, f64, bool, bool) {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let cx = x.clamp(0.0, max_x);
        let cy = y.clamp(0.0, max_y);
        let x0 = (cx.floor() as usize).min(self.width as usize - 2);
        let y0 = (cy.floor() as usize).min(self.height as usize - 2);
        (x0, y0, cx - x0 as f64, cy - y0 as f64, cx == x, cy == y)
    }

    /// Bilinear intensity and the exact derivative of the interpolant.
    ///
    /// Coordinates are clamped to the image; the derivative along a clamped
    /// axis is zero.
    pub fn sample(&self, p: &Vector2<f64>) -> (f64, Vector2<f64>) {
        let (x0, y0, fx, fy, inside_x, inside_y) = self.cell(p.x, p.y);
        let w = self.width as usize;
        let at = |x: usize, y: usize| self.intensity[y * w + x] as f64;
        let (i00, i10, i01, i11) = (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
        let top = i00 + fx * (i10 - i00);
        let bottom = i01 + fx * (i11 - i01);
        let value = top + fy * (bottom - top);
        let dx = if inside_x {
            (1.0 - fy) * (i10 - i00) + fy * (i11 - i01)
        } else {
            0.0
        };
        let dy = if inside_y { bottom - top } else { 0.0 };
        (value, Vector2::new(dx, dy))
    }

    /// Bilinearly interpolated precomputed gradient.
    pub fn sample_gradient(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (x0, y0, fx, fy, _, _) = self.cell(p.x, p.y);
        let w = self.width as usize;
        let at = |x: usize, y: usize| {
            let g = self.gradient[y * w + x];
            Vector2::new(g[0] as f64, g[1] as f64)
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Half-resolution image by 2×2 averaging (odd trailing rows/cols dropped).
    pub fn downsample(&self) -> Result<Self> {
        let (w, h) = (self.width / 2, self.height / 2);
        let sw = self.width as usize;
        let mut data = Vec::with_capacity(w as usize * h as usize);
        for y in 0..h as usize {
            for x in 0..w as usize {
                let i = |dx: usize, dy: usize| self.intensity[(2 * y + dy) * sw + 2 * x + dx];
                data.push(0.25 * (i(0, 0) + i(1, 0) + i(0, 1) + i(1, 1)));
            }
        }
        Self::new(w, h, data)
    }

    /// Image pyramid with `levels` entries, finest first.
    pub fn pyramid(&self, levels: usize) -> Result<Vec<GrayImage>> {
        let mut out = vec![self.clone()];
        while out.len() < levels {
            let next = out.last().expect("non-empty").downsample()?;
            out.push(next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> GrayImage {
        let (w, h) = (20u32, 15u32);
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (0.02 * x as f32 + 0.03 * y as f32).min(1.0)))
            .collect();
        GrayImage::new(w, h, data).unwrap()
    }

    #[test]
    fn interior_gradient_is_central_difference() {
        let img = ramp();
        for y in 1..img.height - 1 {
            for x in 1..img.width - 1 {
                let g = img.gradient_at(x, y);
                let cx = 0.5 * (img.get(x + 1, y) - img.get(x - 1, y));
                let cy = 0.5 * (img.get(x, y + 1) - img.get(x, y - 1));
                assert!((g.x - cx).abs() < 1e-6 && (g.y - cy).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bilinear_hits_pixel_values() {
        let img = ramp();
        for y in 0..img.height {
            for x in 0..img.width {
                let (v, _) = img.sample(&Vector2::new(x as f64, y as f64));
                assert_eq!(v, img.get(x, y));
            }
        }
    }

    #[test]
    fn bilinear_derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = GrayImage::new(32, 32, data).unwrap();
        for _ in 0..500 {
            let p = Vector2::new(rng.random_range(1.0..30.0), rng.random_range(1.0..30.0));
            let (_, g) = img.sample(&p);
            let h = 1e-7;
            let fx = (img.sample(&(p + Vector2::new(h, 0.0))).0 - img.sample(&(p - Vector2::new(h, 0.0))).0) / (2.0 * h);
            let fy = (img.sample(&(p + Vector2::new(0.0, h))).0 - img.sample(&(p - Vector2::new(0.0, h))).0) / (2.0 * h);
            // cell boundaries make one-sided kinks; skip them
            if (p.x.fract() - 0.0).abs() < 1e-6 || (p.y.fract()).abs() < 1e-6 {
                continue;
            }
            assert!((fx - g.x).abs() < 1e-6 && (fy - g.y).abs() < 1e-6);
        }
    }

    #[test]
    fn downsample_averages() {
        let mut data = vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0, 0.25, 0.75];
        data.extend([0.0f32; 8]);
        let img = GrayImage::new(4, 4, data).unwrap();
        let half = img.downsample().unwrap();
        assert_eq!((half.width, half.height), (2, 2));
        assert_eq!(half.intensity, vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(ramp().pyramid(3).unwrap().len(), 3);
    }

    #[test]
    fn u8_round_trip() {
        let data: Vec<u8> = (0..=255).collect();
        let img = GrayImage::from_u8(16, 16, &data).unwrap();
        assert_eq!(img.to_u8(), data);
    }
}
