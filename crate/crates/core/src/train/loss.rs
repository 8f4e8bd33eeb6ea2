//! Target assignment and the detection loss.
//!
//! Each ground-truth box goes to one cell: the cell containing its centre
//! on the level whose size bracket holds its longest side. Brackets are
//! 16 / 64 / 160 px at 640 px input and scale linearly with the image size.
//! When that cell is already taken (smaller boxes claim first), the box
//! moves to the same position on the nearest other level; only when every
//! level is taken is it dropped and counted as a collision.
//!
//! ```text
//! L = λ_box · mean_pos(1 − IoU(decoded, gt)) + λ_cls · Σ_all BCE(logit, target) / max(1, #pos)
//! ```
//!
//! Gradients with respect to the raw head tensors are computed in closed
//! form and returned alongside the loss, ready to seed the tape.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::metrics::GroundTruth;
use crate::network::{Level, BOX_CHANNELS};
use crate::postproc::{decode_cell, WH_CAP};
use crate::tensor::kernels::sigmoid_scalar;
use crate::Tensor;

/// Longest-side brackets (P2|P3, P3|P4, P4|P5) at the 640 px reference.
pub const REFERENCE_BRACKETS: [f64; 3] = [16.0, 64.0, 160.0];
pub const REFERENCE_SIZE: f64 = 640.0;
/// Boxes narrower or shorter than this many pixels are not trained on.
pub const MIN_GT_SIDE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_box: f64,
    pub lambda_cls: f64,
    pub num_classes: usize,
    pub image_size: usize,
}

impl LossConfig {
    pub fn new(num_classes: usize, image_size: usize) -> Self {
        Self {
            lambda_box: 5.0,
            lambda_cls: 1.0,
            num_classes,
            image_size,
        }
    }
}

/// One positive cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub level: Level,
    pub batch: usize,
    pub y: usize,
    pub x: usize,
    pub gt: GroundTruth,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    pub targets: Vec<Target>,
    /// Boxes under one pixel.
    pub skipped_small: usize,
    /// Boxes that found every candidate cell taken.
    pub collisions: usize,
    /// Boxes placed on a level other than their bracket's.
    pub relocated: usize,
}

/// Level whose bracket contains `longest_side` at `image_size`.
pub fn bracket_level(longest_side: f64, image_size: usize) -> Level {
    let k = image_size as f64 / REFERENCE_SIZE;
    let idx = REFERENCE_BRACKETS.iter().take_while(|&&b| longest_side >= b * k).count();
    Level::ALL[idx]
}

pub fn assign_targets(gts: &[Vec<GroundTruth>], levels: &[Level], image_size: usize) -> Assignment {
    let mut out = Assignment::default();
    let mut taken: BTreeSet<(Level, usize, usize, usize)> = BTreeSet::new();
    let side = image_size as f64;
    for (n, image_gts) in gts.iter().enumerate() {
        let mut order: Vec<usize> = (0..image_gts.len()).collect();
        order.sort_by(|&a, &b| image_gts[a].bbox.area().total_cmp(&image_gts[b].bbox.area()).then(a.cmp(&b)));
        for i in order {
            let gt = image_gts[i];
            let b = gt.bbox;
            if !(b.width() >= MIN_GT_SIDE && b.height() >= MIN_GT_SIDE) {
                out.skipped_small += 1;
                continue;
            }
            let preferred = bracket_level(b.width().max(b.height()), image_size).index() as isize;
            let mut candidates = levels.to_vec();
            candidates.sort_by_key(|l| ((l.index() as isize - preferred).abs(), l.index()));
            let (cx, cy) = b.center();
            let mut placed = false;
            for (rank, &level) in candidates.iter().enumerate() {
                let s = level.stride() as f64;
                let cells = image_size / level.stride();
                let x = ((cx.clamp(0.0, side) / s) as usize).min(cells - 1);
                let y = ((cy.clamp(0.0, side) / s) as usize).min(cells - 1);
                if taken.insert((level, n, y, x)) {
                    if rank > 0 || level.index() as isize != preferred {
                        out.relocated += 1;
                    }
                    out.targets.push(Target { level, batch: n, y, x, gt });
                    placed = true;
                    break;
                }
            }
            if !placed {
                out.collisions += 1;
            }
        }
    }
    out
}

/// `(IoU, ∂IoU/∂t)` for one cell's regressors against `gt`.
pub fn iou_and_grad(t: [f64; 4], x: usize, y: usize, stride: usize, gt: &crate::postproc::BBox) -> (f64, [f64; 4]) {
    let p = decode_cell(t, x, y, stride);
    let (w, h) = (p.width(), p.height());
    let iw = p.x2.min(gt.x2) - p.x1.max(gt.x1);
    let ih = p.y2.min(gt.y2) - p.y1.max(gt.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = w * h + gt.area() - inter;
    let iou = inter / union;
    let g_i = 1.0 / union + inter / (union * union);
    let g_a = -inter / (union * union);
    // ∂iw/∂x1, ∂iw/∂x2 (and likewise for y); ties take the prediction side.
    let dw1 = if p.x1 >= gt.x1 { -1.0 } else { 0.0 };
    let dw2 = if p.x2 <= gt.x2 { 1.0 } else { 0.0 };
    let dh1 = if p.y1 >= gt.y1 { -1.0 } else { 0.0 };
    let dh2 = if p.y2 <= gt.y2 { 1.0 } else { 0.0 };
    let (gx1, gx2) = (g_i * ih * dw1, g_i * ih * dw2);
    let (gy1, gy2) = (g_i * iw * dh1, g_i * iw * dh2);
    let d_cx = gx1 + gx2;
    let d_cy = gy1 + gy2;
    let d_w = 0.5 * (gx2 - gx1) + g_a * h;
    let d_h = 0.5 * (gy2 - gy1) + g_a * w;
    let s = stride as f64;
    let dsig = |v: f64| {
        let q = sigmoid_scalar(v);
        q * (1.0 - q)
    };
    let shift = (WH_CAP - 1.0).ln();
    (
        iou,
        [
            d_cx * s * dsig(t[0]),
            d_cy * s * dsig(t[1]),
            d_w * WH_CAP * s * dsig(t[2] - shift),
            d_h * WH_CAP * s * dsig(t[3] - shift),
        ],
    )
}

/// Numerically stable `BCE(σ(l), y)` and its derivative `σ(l) − y`.
fn bce(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid_scalar(logit) - target)
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    /// Already weighted by λ_box.
    pub box_loss: f64,
    /// Already weighted by λ_cls.
    pub cls_loss: f64,
    pub num_pos: usize,
    pub mean_iou: f64,
    pub assignment: Assignment,
    /// ∂L/∂raw per level, same shapes as the inputs.
    pub grads: BTreeMap<Level, Tensor>,
}

pub fn assign_and_loss(raw: &BTreeMap<Level, Tensor>, gts: &[Vec<GroundTruth>], cfg: &LossConfig) -> Result<LossOutput> {
    let nc = cfg.num_classes;
    for (level, t) in raw {
        let s = t.shape();
        let cells = cfg.image_size / level.stride();
        if s.n != gts.len() || s.c != BOX_CHANNELS + nc || s.h != cells || s.w != cells {
            return Err(shape_err(format!(
                "{level} output {s} does not match batch {} with {nc} classes at {} px",
                gts.len(),
                cfg.image_size
            )));
        }
    }
    let levels: Vec<Level> = raw.keys().copied().collect();
    let assignment = assign_targets(gts, &levels, cfg.image_size);
    let num_pos = assignment.targets.len();
    let cls_norm = cfg.lambda_cls / num_pos.max(1) as f64;

    let mut positives: BTreeMap<(Level, usize, usize, usize), usize> = BTreeMap::new();
    for t in &assignment.targets {
        positives.insert((t.level, t.batch, t.y, t.x), t.gt.class_id);
    }

    let mut grads = BTreeMap::new();
    let mut cls_sum = 0.0;
    for (&level, t) in raw {
        let s = t.shape();
        let mut g = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..nc {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let target = match positives.get(&(level, n, y, x)) {
                            Some(&k) if k == c => 1.0,
                            _ => 0.0,
                        };
                        let (l, d) = bce(t.at(n, BOX_CHANNELS + c, y, x), target);
                        cls_sum += l;
                        g.set(n, BOX_CHANNELS + c, y, x, d * cls_norm);
                    }
                }
            }
        }
        grads.insert(level, g);
    }

    let mut box_sum = 0.0;
    let mut iou_sum = 0.0;
    let box_norm = if num_pos > 0 { cfg.lambda_box / num_pos as f64 } else { 0.0 };
    for tg in &assignment.targets {
        let raw_t = &raw[&tg.level];
        let reg = [0, 1, 2, 3].map(|c| raw_t.at(tg.batch, c, tg.y, tg.x));
        let (iou, d) = iou_and_grad(reg, tg.x, tg.y, tg.level.stride(), &tg.gt.bbox);
        box_sum += 1.0 - iou;
        iou_sum += iou;
        let g = grads.get_mut(&tg.level).expect("level present");
        for (c, dc) in d.iter().enumerate() {
            g.set(tg.batch, c, tg.y, tg.x, -dc * box_norm);
        }
    }

    let box_loss = box_sum * box_norm;
    let cls_loss = cls_sum * cls_norm;
    Ok(LossOutput {
        total: box_loss + cls_loss,
        box_loss,
        cls_loss,
        num_pos,
        mean_iou: if num_pos > 0 { iou_sum / num_pos as f64 } else { 0.0 },
        assignment,
        grads,
    })
}
