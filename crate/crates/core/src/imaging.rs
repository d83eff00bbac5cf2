//! RGB frames, square patch extraction and the photometric/geometric
//! augmentations used for first-frame samples and offline training.
//!
//! Continuous pixel coordinates: pixel `(i, j)` covers `[j, j+1) × [i, i+1)`
//! so its center is at `(j + 0.5, i + 0.5)`. Reads outside the frame are
//! zero.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::prpool::BoundingBox;
use crate::tensor::{Scalar, Tensor};

/// Interleaved RGB image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Image::new(width, height);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Bilinear read at continuous coordinates; zero outside.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let (u, v) = (x - 0.5, y - 0.5);
        let (x0, y0) = (u.floor(), v.floor());
        let (fx, fy) = ((u - x0) as f32, (v - y0) as f32);
        let mut out = [0f32; 3];
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (xi, yi) = (x0 as i64 + dx, y0 as i64 + dy);
                let w = wx * wy;
                if w == 0.0 || xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                    continue;
                }
                let p = self.pixel(xi as usize, yi as usize);
                for c in 0..3 {
                    out[c] += w * p[c];
                }
            }
        }
        out
    }

    /// `H×W×3` tensor, centered by subtracting 0.5.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(v as f64 - 0.5)).collect();
        Tensor::new(vec![self.height, self.width, 3], data).expect("image buffer matches its shape")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Image::from_raw(w as usize, h as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::invalid("image buffer size"))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    /// Resample through an inverse map `out pixel center -> source coords`.
    fn warp(&self, width: usize, height: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
        let mut out = Image::new(width, height);
        for i in 0..height {
            for j in 0..width {
                let (sx, sy) = map(j as f64 + 0.5, i as f64 + 0.5);
                out.set_pixel(j, i, self.sample(sx, sy));
            }
        }
        out
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Image {
        self.warp(self.width, self.height, |x, y| (x - dx, y - dy))
    }

    /// Rotation by `degrees` about the image center.
    pub fn rotate(&self, degrees: f64) -> Image {
        let (s, c) = degrees.to_radians().sin_cos();
        let (mx, my) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        self.warp(self.width, self.height, |x, y| {
            let (u, v) = (x - mx, y - my);
            (c * u + s * v + mx, -s * u + c * v + my)
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.width, self.height);
        for i in 0..self.height {
            for j in 0..self.width {
                out.set_pixel(self.width - 1 - j, i, self.pixel(j, i));
            }
        }
        out
    }

    /// Separable Gaussian blur, borders clamped.
    pub fn blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let r = (3.0 * sigma).ceil() as i64;
        let k: Vec<f32> = (-r..=r)
            .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp() as f32)
            .collect();
        let norm: f32 = k.iter().sum();
        let k: Vec<f32> = k.iter().map(|v| v / norm).collect();
        let pass = |src: &Image, horizontal: bool| {
            let mut out = Image::new(src.width, src.height);
            for i in 0..src.height {
                for j in 0..src.width {
                    let mut acc = [0f32; 3];
                    for (t, &kw) in (-r..=r).zip(&k) {
                        let (x, y) = if horizontal {
                            ((j as i64 + t).clamp(0, src.width as i64 - 1) as usize, i)
                        } else {
                            (j, (i as i64 + t).clamp(0, src.height as i64 - 1) as usize)
                        };
                        let p = src.pixel(x, y);
                        for c in 0..3 {
                            acc[c] += kw * p[c];
                        }
                    }
                    out.set_pixel(j, i, acc);
                }
            }
            out
        };
        pass(&pass(self, true), false)
    }

    /// Zero each pixel with probability `p` and rescale the survivors.
    pub fn dropout<R: Rng>(&self, p: f64, rng: &mut R) -> Image {
        let keep = (1.0 - p) as f32;
        let mut out = self.clone();
        for px in out.data.chunks_mut(3) {
            if rng.random_bool(p) {
                px.fill(0.0);
            } else {
                px.iter_mut().for_each(|v| *v /= keep);
            }
        }
        out
    }

    /// Per-channel gain.
    pub fn color_scale(&self, gains: [f32; 3]) -> Image {
        let mut out = self.clone();
        for px in out.data.chunks_mut(3) {
            for c in 0..3 {
                px[c] *= gains[c];
            }
        }
        out
    }
}

/// `patch = (frame - origin) * scale`, the same for both axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale: f64,
}

impl PatchTransform {
    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin_x) * self.scale, (y - self.origin_y) * self.scale)
    }

    pub fn to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.scale + self.origin_x, y / self.scale + self.origin_y)
    }

    pub fn box_to_patch(&self, b: &BoundingBox) -> BoundingBox {
        let (cx, cy) = self.to_patch(b.cx, b.cy);
        BoundingBox {
            cx,
            cy,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    pub fn box_to_frame(&self, b: &BoundingBox) -> BoundingBox {
        let (cx, cy) = self.to_frame(b.cx, b.cy);
        BoundingBox {
            cx,
            cy,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }
}

/// Side of the square region searched around `b`.
pub fn crop_side(b: &BoundingBox, area_factor: f64) -> f64 {
    area_factor * (b.w * b.h).sqrt()
}

/// Square crop of side `area_factor·√(w·h)` centered on `b`, resized to
/// `out_size × out_size`.
pub fn extract_patch(
    frame: &Image,
    b: &BoundingBox,
    area_factor: f64,
    out_size: usize,
) -> Result<(Image, PatchTransform)> {
    b.validate()?;
    if !(area_factor > 0.0) {
        return Err(Error::invalid(format!(
            "area factor must be positive, got {area_factor}"
        )));
    }
    extract_square(frame, b.cx, b.cy, crop_side(b, area_factor), out_size)
}

/// Square crop of side `side` centered at `(cx, cy)`. Downscaling
/// averages a grid of bilinear reads per output pixel to limit aliasing.
pub fn extract_square(frame: &Image, cx: f64, cy: f64, side: f64, out_size: usize) -> Result<(Image, PatchTransform)> {
    if frame.is_empty() {
        return Err(Error::invalid("empty frame"));
    }
    if out_size == 0 || !(side > 0.0) || !side.is_finite() {
        return Err(Error::invalid(format!("bad crop: side {side}, output {out_size}")));
    }
    let t = PatchTransform {
        origin_x: cx - side / 2.0,
        origin_y: cy - side / 2.0,
        scale: out_size as f64 / side,
    };
    let sub = ((1.0 / t.scale).ceil() as usize).clamp(1, 4);
    let inv = 1.0 / (sub * sub) as f32;
    let mut out = Image::new(out_size, out_size);
    for i in 0..out_size {
        for j in 0..out_size {
            let mut acc = [0f32; 3];
            for si in 0..sub {
                for sj in 0..sub {
                    let px = j as f64 + (sj as f64 + 0.5) / sub as f64;
                    let py = i as f64 + (si as f64 + 0.5) / sub as f64;
                    let (fx, fy) = t.to_frame(px, py);
                    let p = frame.sample(fx, fy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            out.set_pixel(j, i, acc.map(|v| v * inv));
        }
    }
    Ok((out, t))
}
