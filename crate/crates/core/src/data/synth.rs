//! Synthetic small-object scenes: coloured shapes over textured noise, with
//! crowding and occlusion.
//!
//! Each class has its own silhouette (rectangle, ellipse, triangle, diamond,
//! cross, ring, …) and hue family, so small instances remain separable.
//! Objects drawn later cover earlier ones; boxes always describe the full
//! extent of an object whether or not it is covered.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::metrics::GroundTruth;
use crate::postproc::BBox;
use crate::rng::SplitMix64;
use crate::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Relative class frequencies; empty means uniform.
    pub class_weights: Vec<f64>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range as a fraction of the image side.
    pub size_range: (f64, f64),
    pub noise_amplitude: f64,
    /// Chance that an object is placed overlapping an earlier one.
    pub occlusion_prob: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            num_classes: 3,
            class_weights: Vec::new(),
            min_objects: 5,
            max_objects: 25,
            size_range: (0.02, 0.08),
            noise_amplitude: 0.15,
            occlusion_prob: 0.2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(config_err(format!(
                "object size range ({lo}, {hi}) exceeds the image: need 0 < min <= max < 1 (fraction of the side)"
            )));
        }
        if self.image_size == 0 || self.num_classes == 0 {
            return Err(config_err("image_size and num_classes must be positive"));
        }
        if self.min_objects > self.max_objects {
            return Err(config_err(format!(
                "min_objects {} exceeds max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        if !self.class_weights.is_empty()
            && (self.class_weights.len() != self.num_classes
                || self.class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
                || self.class_weights.iter().sum::<f64>() <= 0.0)
        {
            return Err(config_err("class_weights must be num_classes non-negative values with a positive sum"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || !(self.noise_amplitude >= 0.0) {
            return Err(config_err("occlusion_prob must be in [0,1] and noise_amplitude non-negative"));
        }
        Ok(())
    }

    /// Normalised class probabilities.
    pub fn class_probabilities(&self) -> Vec<f64> {
        if self.class_weights.is_empty() {
            return vec![1.0 / self.num_classes as f64; self.num_classes];
        }
        let total: f64 = self.class_weights.iter().sum();
        self.class_weights.iter().map(|w| w / total).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// (1, 3, H, W), values in [0, 1].
    pub image: Tensor,
    pub gts: Vec<GroundTruth>,
    pub seed: u64,
}

/// Number of distinct silhouettes; classes beyond this reuse them with a
/// different hue.
const SILHOUETTES: usize = 6;

fn inside(class: usize, u: f64, v: f64) -> bool {
    // (u, v) in [-1, 1]² relative to the object box.
    match class % SILHOUETTES {
        0 => true,
        1 => u * u + v * v <= 1.0,
        2 => v >= -1.0 && u.abs() <= (v + 1.0) / 2.0,
        3 => u.abs() + v.abs() <= 1.0,
        4 => u.abs() <= 0.35 || v.abs() <= 0.35,
        _ => {
            let r = u * u + v * v;
            (0.3..=1.0).contains(&r)
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Smooth value noise: bilinear interpolation of a coarse random grid.
fn value_noise(rng: &mut SplitMix64, size: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / size as f64 * cells as f64;
        let (iy, ty) = (fy.floor() as usize, fy - fy.floor());
        for x in 0..size {
            let fx = x as f64 / size as f64 * cells as f64;
            let (ix, tx) = (fx.floor() as usize, fx - fx.floor());
            let a = grid[iy * g + ix] * (1.0 - tx) + grid[iy * g + ix + 1] * tx;
            let b = grid[(iy + 1) * g + ix] * (1.0 - tx) + grid[(iy + 1) * g + ix + 1] * tx;
            out[y * size + x] = a * (1.0 - ty) + b * ty;
        }
    }
    out
}

fn pick_class(rng: &mut SplitMix64, probs: &[f64]) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Deterministic function of `(cfg, seed)`.
pub fn generate_scene(cfg: &GenConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let size = cfg.image_size;
    let side = size as f64;
    let mut rng = SplitMix64::new(seed);

    // Background: tinted base, large-scale texture, fine grain.
    let base = hsv(rng.next_f64(), rng.uniform(0.05, 0.3), rng.uniform(0.3, 0.7));
    let coarse = value_noise(&mut rng, size, 4);
    let fine = value_noise(&mut rng, size, (size / 8).max(1));
    let mut img = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for i in 0..size * size {
            let grain = rng.uniform(-1.0, 1.0);
            let v = base[c] + cfg.noise_amplitude * (0.6 * coarse[i] + 0.3 * fine[i] + 0.3 * grain);
            img[c * size * size + i] = v.clamp(0.0, 1.0);
        }
    }

    let probs = cfg.class_probabilities();
    let count = cfg.min_objects + rng.below((cfg.max_objects - cfg.min_objects + 1) as u64) as usize;
    let (lo, hi) = (cfg.size_range.0 * side, cfg.size_range.1 * side);
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = pick_class(&mut rng, &probs);
        let w = rng.uniform(lo, hi);
        let h = rng.uniform(lo, hi);
        let (cx, cy) = match gts.last() {
            Some(prev) if rng.bernoulli(cfg.occlusion_prob) => {
                // Centre near a corner of the previous object.
                let (px, py) = prev.bbox.center();
                let dx = rng.uniform(0.3, 0.6) * (prev.bbox.width() + w) * if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                let dy = rng.uniform(0.3, 0.6) * (prev.bbox.height() + h) * if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                (px + dx, py + dy)
            }
            _ => (rng.uniform(0.0, side), rng.uniform(0.0, side)),
        };
        let cx = cx.clamp(w / 2.0, side - w / 2.0);
        let cy = cy.clamp(h / 2.0, side - h / 2.0);
        let bbox = BBox::from_center(cx, cy, w, h);
        let hue = class_id as f64 / cfg.num_classes as f64 + rng.uniform(-0.06, 0.06);
        let color = hsv(hue, rng.uniform(0.6, 1.0), rng.uniform(0.75, 1.0));
        let (x0, x1) = (bbox.x1.floor().max(0.0) as usize, (bbox.x2.ceil() as usize).min(size));
        let (y0, y1) = (bbox.y1.floor().max(0.0) as usize, (bbox.y2.ceil() as usize).min(size));
        for y in y0..y1 {
            let v = (y as f64 + 0.5 - cy) / (h / 2.0);
            for x in x0..x1 {
                let u = (x as f64 + 0.5 - cx) / (w / 2.0);
                if u.abs() <= 1.0 && v.abs() <= 1.0 && inside(class_id, u, v) {
                    for (c, col) in color.iter().enumerate() {
                        img[(c * size + y) * size + x] = *col;
                    }
                }
            }
        }
        gts.push(GroundTruth { bbox, class_id });
    }
    Ok(Scene {
        image: Tensor::new(Shape::new(1, 3, size, size), img)?,
        gts,
        seed,
    })
}
