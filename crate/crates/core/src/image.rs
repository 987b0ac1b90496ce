//! Plain pixel containers shared by every module: RGB images in `[0, 1]`
//! stored height-major with interleaved channels, and binary masks.

use std::path::Path;

use kvmix_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    /// Square window of side `max(h, w) + 2 * margin`, centred on the box
    /// and shifted to lie inside a `canvas`-sized square. The side is capped
    /// at the canvas size.
    pub fn square_window(&self, margin: usize, canvas: usize) -> BBox {
        let side = (self.height().max(self.width()) + 2 * margin).min(canvas);
        let place = |lo: usize, hi: usize| {
            let centre2 = lo + hi; // twice the centre
            let start = (centre2 as isize - side as isize) / 2;
            start.clamp(0, (canvas - side) as isize) as usize
        };
        let y0 = place(self.y0, self.y1);
        let x0 = place(self.x0, self.x1);
        BBox {
            y0,
            x0,
            y1: y0 + side,
            x1: x0 + side,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    /// `height * width * 3` intensities in `[0, 1]`.
    pub data: Vec<f32>,
}

impl ImageGrid {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `(1, 3, H, W)` tensor scaled to `[-1, 1]`.
    pub fn to_model_tensor(&self) -> Tensor {
        Tensor::from_vec(self.to_chw(2.0, -1.0), &[1, 3, self.height, self.width])
    }

    /// `(3, H, W)` tensor in `[0, 1]`.
    pub fn to_unit_tensor(&self) -> Tensor {
        Tensor::from_vec(self.to_chw(1.0, 0.0), &[3, self.height, self.width])
    }

    fn to_chw(&self, scale: f32, shift: f32) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c] * scale + shift;
            }
        }
        out
    }

    /// Inverse of [`ImageGrid::to_model_tensor`] for one batch element,
    /// clamping to the valid range.
    pub fn from_model_tensor(t: &Tensor, index: usize) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 4, "expected (B, 3, H, W), got {s:?}");
        let (h, w) = (s[2], s[3]);
        let hw = h * w;
        let src = &t.data()[index * 3 * hw..(index + 1) * 3 * hw];
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = ((src[c * hw + p] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    pub fn crop(&self, b: &BBox) -> Self {
        let mut out = ImageGrid::filled(b.height(), b.width(), [0.0; 3]);
        for y in 0..b.height() {
            for x in 0..b.width() {
                out.set(y, x, self.get(b.y0 + y, b.x0 + x));
            }
        }
        out
    }

    /// Nearest-neighbour resampling using pixel-centre alignment. Upscaling
    /// followed by downscaling to the original size is exact.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let mut out = ImageGrid::filled(height, width, [0.0; 3]);
        for y in 0..height {
            let sy = nearest_source(y, height, self.height);
            for x in 0..width {
                let sx = nearest_source(x, width, self.width);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    /// Box-filter downscaling when the size divides evenly, nearest
    /// otherwise.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height < self.height
            && width < self.width
            && self.height % height == 0
            && self.width % width == 0
        {
            let (fy, fx) = (self.height / height, self.width / width);
            let mut out = ImageGrid::filled(height, width, [0.0; 3]);
            let norm = 1.0 / (fy * fx) as f32;
            for y in 0..height {
                for x in 0..width {
                    let mut acc = [0.0f32; 3];
                    for dy in 0..fy {
                        for dx in 0..fx {
                            let p = self.get(y * fy + dy, x * fx + dx);
                            for c in 0..3 {
                                acc[c] += p[c];
                            }
                        }
                    }
                    out.set(y, x, acc.map(|v| v * norm));
                }
            }
            return out;
        }
        self.resize_nearest(height, width)
    }

    pub fn gray(&self, y: usize, x: usize) -> f32 {
        let [r, g, b] = self.get(y, x);
        0.299 * r + 0.587 * g + 0.114 * b
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data: img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
        })
    }
}

#[inline]
fn nearest_source(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let s = ((2 * dst + 1) * src_len) / (2 * dst_len);
    s.min(src_len - 1)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl MaskGrid {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => BBox {
                            y0: y,
                            x0: x,
                            y1: y + 1,
                            x1: x + 1,
                        },
                        Some(b) => BBox {
                            y0: b.y0.min(y),
                            x0: b.x0.min(x),
                            y1: b.y1.max(y + 1),
                            x1: b.x1.max(x + 1),
                        },
                    });
                }
            }
        }
        b
    }

    pub fn union(&self, other: &MaskGrid) -> MaskGrid {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &MaskGrid) -> MaskGrid {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn complement(&self) -> MaskGrid {
        MaskGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    fn zip_with(&self, other: &MaskGrid, f: impl Fn(bool, bool) -> bool) -> MaskGrid {
        assert_eq!((self.height, self.width), (other.height, other.width));
        MaskGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Square (Chebyshev) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> MaskGrid {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let mut out = MaskGrid::empty(self.height, self.width);
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                let hit = (-r..=r).any(|dy| {
                    (-r..=r).any(|dx| {
                        let (yy, xx) = (y + dy, x + dx);
                        yy >= 0
                            && xx >= 0
                            && yy < self.height as isize
                            && xx < self.width as isize
                            && self.get(yy as usize, xx as usize)
                    })
                });
                out.set(y as usize, x as usize, hit);
            }
        }
        out
    }

    /// Moves the mask by `(dx, dy)`; pixels shifted past the border are
    /// dropped and the vacated area is empty.
    pub fn translate(&self, dx: i32, dy: i32) -> MaskGrid {
        let mut out = MaskGrid::empty(self.height, self.width);
        for y in 0..self.height as i32 {
            for x in 0..self.width as i32 {
                let (sy, sx) = (y - dy, x - dx);
                if sy >= 0
                    && sx >= 0
                    && (sy as usize) < self.height
                    && (sx as usize) < self.width
                    && self.get(sy as usize, sx as usize)
                {
                    out.set(y as usize, x as usize, true);
                }
            }
        }
        out
    }

    /// Max-pools to `size x size`; a cell is set when any covered pixel is.
    /// Requires the size to divide the mask evenly.
    pub fn max_pool_to(&self, size: usize) -> MaskGrid {
        if size == self.height && size == self.width {
            return self.clone();
        }
        assert!(
            self.height % size == 0 && self.width % size == 0,
            "cannot pool {}x{} to {size}",
            self.height,
            self.width
        );
        let (fy, fx) = (self.height / size, self.width / size);
        let mut out = MaskGrid::empty(size, size);
        for y in 0..size {
            for x in 0..size {
                let hit = (0..fy).any(|dy| (0..fx).any(|dx| self.get(y * fy + dy, x * fx + dx)));
                out.set(y, x, hit);
            }
        }
        out
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> MaskGrid {
        let mut out = MaskGrid::empty(height, width);
        for y in 0..height {
            let sy = nearest_source(y, height, self.height);
            for x in 0..width {
                out.set(y, x, self.get(sy, nearest_source(x, width, self.width)));
            }
        }
        out
    }

    pub fn crop(&self, b: &BBox) -> MaskGrid {
        let mut out = MaskGrid::empty(b.height(), b.width());
        for y in 0..b.height() {
            for x in 0..b.width() {
                out.set(y, x, self.get(b.y0 + y, b.x0 + x));
            }
        }
        out
    }

    pub fn iou(&self, other: &MaskGrid) -> f32 {
        let inter = self.intersect(other).area();
        let uni = self.union(other).area();
        if uni == 0 {
            1.0
        } else {
            inter as f32 / uni as f32
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data: Vec<bool> = img.into_raw().into_iter().map(|b| b >= 128).collect();
        if data.len() != (w * h) as usize {
            return Err(Error::Shape(format!("mask {} has bad size", path.display())));
        }
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_upscale_then_downscale_is_exact() {
        let mut img = ImageGrid::filled(7, 7, [0.0; 3]);
        for y in 0..7 {
            for x in 0..7 {
                img.set(y, x, [y as f32 / 7.0, x as f32 / 7.0, 0.5]);
            }
        }
        let back = img.resize_nearest(32, 32).resize_nearest(7, 7);
        assert_eq!(back, img);
    }

    #[test]
    fn square_window_stays_inside_canvas() {
        let b = BBox {
            y0: 0,
            x0: 28,
            y1: 5,
            x1: 32,
        };
        let w = b.square_window(2, 32);
        assert_eq!(w.height(), 9);
        assert_eq!(w.width(), 9);
        assert!(w.y0 == 0 && w.x1 <= 32);
        assert!(w.x0 <= b.x0 && w.y1 >= b.y1);
    }

    #[test]
    fn translate_and_pool() {
        let full = MaskGrid::full(8, 8);
        assert_eq!(full.translate(1, 0).area(), 56);
        let mut m = MaskGrid::empty(8, 8);
        m.set(3, 5, true);
        let p = m.max_pool_to(4);
        assert!(p.get(1, 2));
        assert_eq!(p.area(), 1);
        assert_eq!(m.dilate(1).area(), 9);
    }
}
