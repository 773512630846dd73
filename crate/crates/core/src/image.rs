//! RGB images in planar `[3, H, W]` layout with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Square region of a source image, in pixel units with pixel edges at
/// integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = vec![0.0; 3 * height * width];
        for (c, &v) in rgb.iter().enumerate() {
            data[c * height * width..(c + 1) * height * width].fill(v);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel_mean(&self) -> [f32; 3] {
        let n = (self.height * self.width) as f64;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let plane =
                &self.data[c * self.height * self.width..(c + 1) * self.height * self.width];
            *o = (plane.iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        }
        out
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamping to
    /// the border.
    fn sample(&self, c: usize, sy: f64, sx: f64) -> f32 {
        let max_y = (self.height - 1) as f64;
        let max_x = (self.width - 1) as f64;
        let sy = sy.clamp(0.0, max_y);
        let sx = sx.clamp(0.0, max_x);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = (sy - y0 as f64) as f32;
        let fx = (sx - x0 as f64) as f32;
        let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
        let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize using the half-pixel-center convention.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let mut out = Self::filled(out_h, out_w, [0.0; 3]);
        for c in 0..3 {
            for v in 0..out_h {
                let src_y = (v as f64 + 0.5) * sy - 0.5;
                for u in 0..out_w {
                    let src_x = (u as f64 + 0.5) * sx - 0.5;
                    out.set(c, v, u, self.sample(c, src_y, src_x));
                }
            }
        }
        out
    }

    /// Resamples `region` to an `out x out` image. Output pixels whose
    /// source point falls outside the image get `fill`. Returns the crop
    /// and the fraction of filled pixels.
    pub fn crop_square(&self, region: Region, out: usize, fill: [f32; 3]) -> (Self, f64) {
        let step = region.side / out as f64;
        let mut img = Self::filled(out, out, fill);
        let mut filled = 0usize;
        for v in 0..out {
            let py = region.y0 + (v as f64 + 0.5) * step;
            for u in 0..out {
                let px = region.x0 + (u as f64 + 0.5) * step;
                if py < 0.0 || px < 0.0 || py > self.height as f64 || px > self.width as f64 {
                    filled += 1;
                    continue;
                }
                for c in 0..3 {
                    img.set(c, v, u, self.sample(c, py - 0.5, px - 0.5));
                }
            }
        }
        (img, filled as f64 / (out * out) as f64)
    }

    pub fn flip_horizontal(&self) -> Self {
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

    pub fn scale_brightness(&self, factor: f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| (v * factor).clamp(0.0, 1.0))
                .collect(),
        }
    }

    /// Per-channel standardization into a `[3, H, W]` tensor.
    pub fn standardize<T: Real>(&self, mean: [f32; 3], std: [f32; 3]) -> Tensor<T> {
        let plane = self.height * self.width;
        Tensor::from_fn([3, self.height, self.width], |i| {
            let c = i / plane;
            T::of(((self.data[i] - mean[c]) / std[c]) as f64)
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..3 {
                px.0[c] = (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut img = Self::filled(h, w, [0.0; 3]);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                img.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
        Ok(img)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropKind {
    Template,
    Search,
}

/// A template or search crop, already resampled to its network input size.
#[derive(Clone, Debug)]
pub struct ImageCrop {
    pub pixels: Image,
    pub kind: CropKind,
}
