//! RGB images as `H x W x 3` floats in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    /// Row-major, channels last.
    pixels: Vec<Elem>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<Elem>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::shape(
                "image",
                format!(
                    "{height}x{width}x3 needs {} values, got {}",
                    height * width * 3,
                    pixels.len()
                ),
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [Elem; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[Elem] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [Elem; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [Elem; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear resize with half-pixel centers; identity when the size
    /// already matches.
    pub fn resized(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let coord = |o: usize, n_in: usize, n_out: usize| {
            let src = ((o as Elem + 0.5) * n_in as Elem / n_out as Elem - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            (i0, (i0 + 1).min(n_in - 1), src - i0 as Elem)
        };
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let (y0, y1, fy) = coord(y, self.height, height);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, self.width, width);
                let (a, b) = (self.pixel(y0, x0), self.pixel(y0, x1));
                let (c, d) = (self.pixel(y1, x0), self.pixel(y1, x1));
                for ch in 0..3 {
                    let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                    let bot = c[ch] * (1.0 - fx) + d[ch] * fx;
                    pixels.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
                }
            }
        }
        Image { height, width, pixels }
    }

    /// Non-overlapping `patch x patch` blocks as rows of a
    /// `[num_patches, patch * patch * 3]` matrix, patches in raster order and
    /// each flattened as (row, col, channel).
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::shape(
                "patchify",
                format!(
                    "{}x{} image is not divisible into {patch}-pixel patches",
                    self.height, self.width
                ),
            ));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let per = patch * patch * 3;
        let mut data = Vec::with_capacity(gh * gw * per);
        for py in 0..gh {
            for px in 0..gw {
                for y in py * patch..(py + 1) * patch {
                    let start = (y * self.width + px * patch) * 3;
                    data.extend_from_slice(&self.pixels[start..start + patch * 3]);
                }
            }
        }
        Tensor::new(&[gh * gw, per], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_grid_counts() {
        let img = Image::filled(32, 32, [0.5; 3]);
        assert_eq!(img.patches(8).unwrap().shape(), &[16, 192]);
        let img = Image::filled(33, 33, [0.5; 3]);
        assert!(matches!(img.patches(8), Err(Error::Shape { .. })));
    }

    #[test]
    fn patch_rows_follow_raster_order() {
        let mut img = Image::filled(4, 4, [0.0; 3]);
        img.set_pixel(2, 3, [1.0, 0.5, 0.25]);
        let p = img.patches(2).unwrap();
        // pixel (2,3) is in patch (1,1) = row 3, local (0,1)
        assert_eq!(&p.row(3)[3..6], &[1.0, 0.5, 0.25]);
        assert_eq!(p.row(0).iter().sum::<Elem>(), 0.0);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = Image::filled(48, 48, [0.2, 0.4, 0.6]);
        let r = img.resized(32, 32);
        assert!(r
            .pixels()
            .chunks(3)
            .all(|p| (p[0] - 0.2).abs() < 1e-12 && (p[2] - 0.6).abs() < 1e-12));
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
    }
}
