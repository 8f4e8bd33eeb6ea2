//! Aspect-preserving resize onto a square canvas.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::postproc::BBox;
use crate::{Shape, Tensor};

/// Canvas fill, the usual grey 114 on a 0–255 scale.
pub const PAD_VALUE: f64 = 114.0 / 255.0;

/// `x' = x·scale + pad_x`, `y' = y·scale + pad_y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl Letterbox {
    pub const IDENTITY: Letterbox = Letterbox {
        scale: 1.0,
        pad_x: 0.0,
        pad_y: 0.0,
    };

    /// Transform taking a `width × height` image onto a `target` square.
    pub fn fit(width: usize, height: usize, target: usize) -> Self {
        let scale = (target as f64 / width as f64).min(target as f64 / height as f64);
        let (nw, nh) = scaled_size(width, height, scale, target);
        Self {
            scale,
            pad_x: ((target - nw) / 2) as f64,
            pad_y: ((target - nh) / 2) as f64,
        }
    }

    pub fn forward(&self, b: &BBox) -> BBox {
        BBox::new(
            b.x1 * self.scale + self.pad_x,
            b.y1 * self.scale + self.pad_y,
            b.x2 * self.scale + self.pad_x,
            b.y2 * self.scale + self.pad_y,
        )
    }

    pub fn inverse(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x1 - self.pad_x) / self.scale,
            (b.y1 - self.pad_y) / self.scale,
            (b.x2 - self.pad_x) / self.scale,
            (b.y2 - self.pad_y) / self.scale,
        )
    }
}

fn scaled_size(width: usize, height: usize, scale: f64, target: usize) -> (usize, usize) {
    let side = |v: usize| ((v as f64 * scale).round() as usize).clamp(1, target);
    (side(width), side(height))
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = input.shape();
    let (sy, sx) = (s.h as f64 / out_h as f64, s.w as f64 / out_w as f64);
    let taps = |o: usize, scale: f64, len: usize| {
        let f = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (f.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, f - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, s.w)).collect();
    Tensor::from_fn(Shape::new(s.n, s.c, out_h, out_w), |n, c, y, x| {
        let (y0, y1, ty) = taps(y, sy, s.h);
        let (x0, x1, tx) = xs[x];
        let top = input.at(n, c, y0, x0) * (1.0 - tx) + input.at(n, c, y0, x1) * tx;
        let bot = input.at(n, c, y1, x0) * (1.0 - tx) + input.at(n, c, y1, x1) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Resizes `image` (N,C,H,W) to fit a `target` square and pads with
/// [`PAD_VALUE`]. `target` must be a positive multiple of 32.
pub fn letterbox(image: &Tensor, target: usize) -> Result<(Tensor, Letterbox)> {
    if target == 0 || target % 32 != 0 {
        return Err(config_err(format!("letterbox target {target} is not a positive multiple of 32")));
    }
    let s = image.shape();
    if s.h == 0 || s.w == 0 {
        return Err(config_err("cannot letterbox an empty image"));
    }
    let lb = Letterbox::fit(s.w, s.h, target);
    let (nw, nh) = scaled_size(s.w, s.h, lb.scale, target);
    if nw == s.w && nh == s.h && nw == target && nh == target {
        return Ok((image.clone(), lb));
    }
    let resized = resize_bilinear(image, nh, nw);
    let (px, py) = (lb.pad_x as usize, lb.pad_y as usize);
    let out = Tensor::from_fn(Shape::new(s.n, s.c, target, target), |n, c, y, x| {
        if y >= py && y < py + nh && x >= px && x < px + nw {
            resized.at(n, c, y - py, x - px)
        } else {
            PAD_VALUE
        }
    });
    Ok((out, lb))
}
