//! Side-by-side comparison renders of two detectors on one image.
//!
//! Left panel: model A (blue); right panel: model B (orange); ground truth
//! in green on both. Ground-truth boxes that B finds and A misses get a red
//! outline, slightly enlarged, on both panels.

use image::{Rgb, RgbImage};

use crate::data::to_rgb8;
use crate::metrics::GroundTruth;
use crate::postproc::{iou, BBox, Detection};
use crate::Tensor;

pub const GREEN: Rgb<u8> = Rgb([0, 200, 0]);
pub const BLUE: Rgb<u8> = Rgb([30, 90, 255]);
pub const ORANGE: Rgb<u8> = Rgb([255, 140, 0]);
pub const RED: Rgb<u8> = Rgb([255, 0, 0]);
/// Columns between the two panels.
pub const GAP: u32 = 4;
/// IoU at which a detection counts as finding a ground-truth box.
pub const HIT_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub missed_by_a: usize,
    pub missed_by_b: usize,
    /// Ground-truth boxes missed by A but found by B.
    pub red: usize,
}

fn hit(g: &GroundTruth, dets: &[Detection]) -> bool {
    dets.iter().any(|d| d.class_id == g.class_id && iou(&d.bbox, &g.bbox) >= HIT_IOU)
}

/// One-pixel rectangle outline; `b` in source pixels, drawn at `scale`
/// within the panel starting at column `x0`, grown by `grow` output pixels.
fn outline(img: &mut RgbImage, b: &BBox, scale: f64, x0: u32, panel_w: u32, grow: i64, color: Rgb<u8>) {
    let h = img.height() as i64;
    let clamp_x = |v: f64| ((v * scale).round() as i64).clamp(0, panel_w as i64 - 1);
    let clamp_y = |v: f64| ((v * scale).round() as i64).clamp(0, h - 1);
    let (l, r) = ((clamp_x(b.x1) - grow).max(0), (clamp_x(b.x2) + grow).min(panel_w as i64 - 1));
    let (t, btm) = ((clamp_y(b.y1) - grow).max(0), (clamp_y(b.y2) + grow).min(h - 1));
    for x in l..=r {
        img.put_pixel(x0 + x as u32, t as u32, color);
        img.put_pixel(x0 + x as u32, btm as u32, color);
    }
    for y in t..=btm {
        img.put_pixel(x0 + l as u32, y as u32, color);
        img.put_pixel(x0 + r as u32, y as u32, color);
    }
}

/// Builds the two-panel raster. `image` is (1,3,H,W) in [0,1]; boxes are in
/// its pixel coordinates; `scale` ≥ 1 enlarges each panel.
pub fn render_comparison(
    image: &Tensor,
    detections_a: &[Detection],
    detections_b: &[Detection],
    gts: &[GroundTruth],
    scale: u32,
) -> (RgbImage, RenderStats) {
    let scale = scale.max(1);
    let base = to_rgb8(image);
    let (w, h) = (base.width() * scale, base.height() * scale);
    let mut out = RgbImage::from_pixel(2 * w + GAP, h, Rgb([255, 255, 255]));
    for panel in 0..2 {
        for y in 0..h {
            for x in 0..w {
                out.put_pixel(panel * (w + GAP) + x, y, *base.get_pixel(x / scale, y / scale));
            }
        }
    }
    let s = scale as f64;
    let mut stats = RenderStats::default();
    for (panel, (dets, color)) in [(detections_a, BLUE), (detections_b, ORANGE)].into_iter().enumerate() {
        let x0 = panel as u32 * (w + GAP);
        for g in gts {
            outline(&mut out, &g.bbox, s, x0, w, 0, GREEN);
        }
        for d in dets {
            outline(&mut out, &d.bbox, s, x0, w, 0, color);
        }
    }
    for g in gts {
        let (a, b) = (hit(g, detections_a), hit(g, detections_b));
        stats.missed_by_a += usize::from(!a);
        stats.missed_by_b += usize::from(!b);
        if !a && b {
            stats.red += 1;
            for panel in 0..2 {
                outline(&mut out, &g.bbox, s, panel * (w + GAP), w, 2, RED);
            }
        }
    }
    (out, stats)
}
