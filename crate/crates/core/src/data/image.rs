use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Planar RGB image with values in `[0, 1]`, stored channel-major (C, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::dim(format!(
                "image data length {} does not match 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        Image { width, height, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Copies the `w × h` window whose top-left pixel is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::dim(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(Image { width: w, height: h, data })
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        let coord = |o: usize, scale: f32, extent: usize| -> (usize, usize, f32) {
            let f = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (f.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, f - i0 as f32)
        };
        let xs: Vec<_> = (0..width).map(|x| coord(x, sx, self.width)).collect();
        let ys: Vec<_> = (0..height).map(|y| coord(y, sy, self.height)).collect();
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
                    let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Image { width, height, data }
    }

    /// `[1, 3, H, W]` tensor of the raw `[0, 1]` values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), data).expect("consistent extents")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_twice_is_identity() {
        let data: Vec<f32> = (0..3 * 4 * 5).map(|v| v as f32 / 60.0).collect();
        let im = Image::new(5, 4, data).unwrap();
        assert_eq!(im.flip_horizontal().flip_horizontal(), im);
        assert_eq!(im.flip_horizontal().get(1, 2, 0), im.get(1, 2, 4));
    }

    #[test]
    fn resize_preserves_constant_images() {
        let im = Image::filled(8, 8, [0.2, 0.4, 0.6]);
        let r = im.resize(12, 12);
        assert!(r.data.iter().take(144).all(|&v| (v - 0.2).abs() < 1e-6));
        assert_eq!(r.width, 12);
    }

    #[test]
    fn crop_copies_window() {
        let data: Vec<f32> = (0..3 * 4 * 4).map(|v| v as f32).collect();
        let im = Image::new(4, 4, data).unwrap();
        let c = im.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.get(0, 0, 0), im.get(0, 2, 1));
        assert_eq!(c.get(2, 1, 1), im.get(2, 3, 2));
        assert!(im.crop(3, 3, 2, 2).is_err());
    }
}
