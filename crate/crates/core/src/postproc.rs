//! Raw head outputs → detections: decoding, IoU and class-wise NMS.
//!
//! Per cell `(y, x)` at stride `s`, with channels `(tx, ty, tw, th, logits…)`:
//!
//! ```text
//! cx = (x + σ(tx))·s        cy = (y + σ(ty))·s
//! w  = 8s·σ(tw − ln 7)      h  = 8s·σ(th − ln 7)
//! ```
//!
//! so an untrained regressor (0) decodes to one stride, small values behave
//! like `s·e^t`, and the size saturates smoothly at eight strides.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::network::{Level, BOX_CHANNELS};
use crate::tensor::{kernels::sigmoid_scalar, Tensor};

/// Box size cap in units of the level stride.
pub const WH_CAP: f64 = 8.0;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub score_threshold: f64,
}

impl DecodeConfig {
    pub fn new(image_size: usize, num_classes: usize) -> Self {
        Self {
            image_size,
            num_classes,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
        }
    }
}

/// Cells skipped while decoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DecodeDiagnostics {
    /// Cells with a non-finite regressor or logit.
    pub non_finite: usize,
    /// Boxes that collapsed to zero area.
    pub degenerate: usize,
}

/// Box size from a raw regressor: `8s·σ(t − ln 7)`.
pub fn decode_size(t: f64, stride: f64) -> f64 {
    WH_CAP * stride * sigmoid_scalar(t - (WH_CAP - 1.0).ln())
}

/// Box decoded from one cell's four regressors.
pub fn decode_cell(t: [f64; 4], x: usize, y: usize, stride: usize) -> BBox {
    let s = stride as f64;
    let cx = (x as f64 + sigmoid_scalar(t[0])) * s;
    let cy = (y as f64 + sigmoid_scalar(t[1])) * s;
    BBox::from_center(cx, cy, decode_size(t[2], s), decode_size(t[3], s))
}

/// Decodes every image in the batch; returns detections per image, in
/// (level, y, x, class) order.
pub fn decode(
    raw: &BTreeMap<Level, Tensor>,
    cfg: &DecodeConfig,
) -> Result<(Vec<Vec<Detection>>, DecodeDiagnostics)> {
    let batch = raw.values().next().map(|t| t.shape().n).unwrap_or(0);
    let mut out = vec![Vec::new(); batch];
    let mut diag = DecodeDiagnostics::default();
    let side = cfg.image_size as f64;
    for (level, t) in raw {
        let s = t.shape();
        let stride = level.stride();
        if s.n != batch || s.c != BOX_CHANNELS + cfg.num_classes || s.h * stride != cfg.image_size || s.w * stride != cfg.image_size {
            return Err(shape_err(format!(
                "{level} output {s} does not match {} classes at image size {}",
                cfg.num_classes, cfg.image_size
            )));
        }
        for (n, dets) in out.iter_mut().enumerate() {
            for y in 0..s.h {
                for x in 0..s.w {
                    let reg = [t.at(n, 0, y, x), t.at(n, 1, y, x), t.at(n, 2, y, x), t.at(n, 3, y, x)];
                    let logits: Vec<f64> = (0..cfg.num_classes).map(|c| t.at(n, BOX_CHANNELS + c, y, x)).collect();
                    if reg.iter().chain(&logits).any(|v| !v.is_finite()) {
                        diag.non_finite += 1;
                        continue;
                    }
                    let mut bbox = None;
                    for (class_id, &l) in logits.iter().enumerate() {
                        let score = sigmoid_scalar(l);
                        if score < cfg.score_threshold {
                            continue;
                        }
                        let b = *bbox.get_or_insert_with(|| decode_cell(reg, x, y, stride).clip(side, side));
                        if !b.is_valid() {
                            diag.degenerate += 1;
                            break;
                        }
                        dets.push(Detection { bbox: b, class_id, score });
                    }
                }
            }
        }
    }
    Ok((out, diag))
}

/// Greedy per-class NMS. Candidates are visited by descending score, ties by
/// input position; a box is dropped when its IoU with an already kept box
/// of the same class exceeds `iou_threshold`. Output is in visiting order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class_id == d.class_id && iou(&dets[k].bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

/// Decode followed by NMS, per image.
pub fn postprocess(
    raw: &BTreeMap<Level, Tensor>,
    cfg: &DecodeConfig,
    iou_threshold: f64,
) -> Result<(Vec<Vec<Detection>>, DecodeDiagnostics)> {
    let (dets, diag) = decode(raw, cfg)?;
    Ok((dets.iter().map(|d| nms(d, iou_threshold)).collect(), diag))
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    image_id: String,
    class_id: usize,
    score: f64,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

/// Writes one JSON object per detection.
pub fn write_predictions_jsonl(out: &mut impl Write, image_id: &str, dets: &[Detection]) -> Result<()> {
    for d in dets {
        let line = PredictionLine {
            image_id: image_id.to_string(),
            class_id: d.class_id,
            score: d.score,
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a prediction dump back as (image_id, detection) pairs.
pub fn read_predictions_jsonl(text: &str) -> Result<Vec<(String, Detection)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let p: PredictionLine = serde_json::from_str(l)?;
            Ok((
                p.image_id,
                Detection {
                    bbox: BBox::new(p.x1, p.y1, p.x2, p.y2),
                    class_id: p.class_id,
                    score: p.score,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Shape;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn decode_cell_arithmetic() {
        let b = decode_cell([0.0, 0.0, 0.0, 0.0], 3, 2, 8);
        assert_eq!(b.center(), (28.0, 20.0));
        assert!((b.width() - 8.0).abs() < 1e-12);
        assert!(decode_size(1e6, 8.0) <= 64.0);
    }

    #[test]
    fn very_negative_logits_give_nothing() {
        let mut raw = BTreeMap::new();
        raw.insert(Level::P3, Tensor::full(Shape::new(1, 6, 4, 4), -100.0));
        let (d, _) = decode(&raw, &DecodeConfig::new(32, 2)).unwrap();
        assert!(d[0].is_empty());
    }

    #[test]
    fn non_finite_cells_are_tallied() {
        let mut t = Tensor::zeros(Shape::new(1, 5, 4, 4));
        t.set(0, 2, 1, 1, f64::NAN);
        t.set(0, 4, 2, 2, f64::INFINITY);
        let mut raw = BTreeMap::new();
        raw.insert(Level::P3, t);
        let (d, diag) = decode(&raw, &DecodeConfig::new(32, 1)).unwrap();
        assert_eq!(diag.non_finite, 2);
        assert_eq!(d[0].len(), 14);
    }

    #[test]
    fn nms_keeps_best_duplicate() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        let dets = [
            Detection { bbox: b, class_id: 0, score: 0.8 },
            Detection { bbox: b, class_id: 0, score: 0.9 },
        ];
        let kept = nms(&dets, 0.5);
        assert_eq!(kept, vec![dets[1]]);
        assert_eq!(nms(&dets[..1], 0.5), vec![dets[0]]);
    }

    #[test]
    fn jsonl_round_trip() {
        let d = Detection {
            bbox: BBox::new(1.0, 2.0, 3.5, 4.25),
            class_id: 2,
            score: 0.75,
        };
        let mut buf = Vec::new();
        write_predictions_jsonl(&mut buf, "img7", &[d, d]).unwrap();
        let back = read_predictions_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, vec![("img7".to_string(), d), ("img7".to_string(), d)]);
    }
}
