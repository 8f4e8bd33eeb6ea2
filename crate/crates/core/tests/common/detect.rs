//! Detection-side references: decoding, NMS, matching and AP written
//! directly from their definitions, plus random instance generators.

use std::collections::BTreeMap;

use masf_core::metrics::{GroundTruth, ImageEval};
use masf_core::network::Level;
use masf_core::postproc::{iou, BBox, Detection};
use masf_core::rng::SplitMix64;
use masf_core::{Shape, Tensor};

pub fn random_box(rng: &mut SplitMix64, side: f64) -> BBox {
    let x = rng.uniform(0.0, side - 2.0);
    let y = rng.uniform(0.0, side - 2.0);
    let w = rng.uniform(1.0, (side - x).min(side / 3.0));
    let h = rng.uniform(1.0, (side - y).min(side / 3.0));
    BBox::new(x, y, x + w, y + h)
}

pub fn random_dets(rng: &mut SplitMix64, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: random_box(rng, 100.0),
            class_id: rng.below(classes as u64) as usize,
            // Coarse scores so ties actually happen.
            score: (rng.below(20) as f64 + 1.0) / 20.0,
        })
        .collect()
}

pub fn reference_decode(raw: &BTreeMap<Level, Tensor>, size: usize, nc: usize, thr: f64) -> Vec<Detection> {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut out = Vec::new();
    for (l, t) in raw {
        let s = l.stride() as f64;
        for y in 0..t.shape().h {
            for x in 0..t.shape().w {
                let cx = (x as f64 + sig(t.at(0, 0, y, x))) * s;
                let cy = (y as f64 + sig(t.at(0, 1, y, x))) * s;
                let w = 8.0 * s * t.at(0, 2, y, x).exp() / (t.at(0, 2, y, x).exp() + 7.0);
                let h = 8.0 * s * t.at(0, 3, y, x).exp() / (t.at(0, 3, y, x).exp() + 7.0);
                let clip = |v: f64| v.max(0.0).min(size as f64);
                let b = BBox::new(clip(cx - w / 2.0), clip(cy - h / 2.0), clip(cx + w / 2.0), clip(cy + h / 2.0));
                for c in 0..nc {
                    let score = sig(t.at(0, 4 + c, y, x));
                    if score >= thr {
                        out.push(Detection { bbox: b, class_id: c, score });
                    }
                }
            }
        }
    }
    out
}

pub fn random_raw(rng: &mut SplitMix64, size: usize, nc: usize, spread: f64) -> BTreeMap<Level, Tensor> {
    Level::ALL
        .iter()
        .map(|&l| {
            let n = size / l.stride();
            (l, Tensor::from_fn(Shape::new(1, 4 + nc, n, n), |_, _, _, _| rng.uniform(-spread, spread)))
        })
        .collect()
}

/// Exhaustive formulation: full IoU matrix up front, then a box survives when
/// no surviving box ranked above it (score desc, index asc) overlaps it.
pub fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| iou(&dets[i].bbox, &dets[j].bbox)).collect()).collect();
    let ranks_above = |i: usize, j: usize| dets[j].score > dets[i].score || (dets[j].score == dets[i].score && j < i);
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by_key(|&i| (0..n).filter(|&j| ranks_above(i, j)).count());
    let mut alive = vec![false; n];
    for &i in &rank {
        alive[i] = !(0..n).any(|j| alive[j] && ranks_above(i, j) && dets[j].class_id == dets[i].class_id && m[j][i] > thr);
    }
    rank.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
}

/// Each hit raises recall by 1/n_gt; its height is the best precision at or
/// beyond its rank.
pub fn reference_ap(flags: &[bool], n_gt: usize) -> f64 {
    let prec: Vec<f64> = (0..flags.len())
        .map(|k| flags[..=k].iter().filter(|&&f| f).count() as f64 / (k + 1) as f64)
        .collect();
    (0..flags.len())
        .filter(|&k| flags[k])
        .map(|k| prec[k..].iter().cloned().fold(0.0, f64::max) / n_gt as f64)
        .sum()
}

/// Same greedy rule, written over a precomputed IoU matrix.
pub fn reference_match(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<bool> {
    let m: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| gts.iter().map(|g| if g.class_id == d.class_id { iou(&d.bbox, &g.bbox) } else { -1.0 }).collect())
        .collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![false; dets.len()];
    for i in order {
        let mut best_j = usize::MAX;
        let mut best = -1.0;
        for j in 0..gts.len() {
            if !taken[j] && m[i][j] >= 0.0 && m[i][j] > best {
                best = m[i][j];
                best_j = j;
            }
        }
        if best_j != usize::MAX && best >= thr {
            taken[best_j] = true;
            out[i] = true;
        }
    }
    out
}

pub fn random_image(rng: &mut SplitMix64, n_det: usize, n_gt: usize) -> ImageEval {
    let ground_truth: Vec<GroundTruth> = (0..n_gt)
        .map(|_| GroundTruth {
            bbox: random_box(rng, 100.0),
            class_id: rng.below(3) as usize,
        })
        .collect();
    // Half of the detections are jittered copies of ground truth.
    let detections = (0..n_det)
        .map(|i| {
            if i % 2 == 0 && !ground_truth.is_empty() {
                let g = ground_truth[rng.below(ground_truth.len() as u64) as usize];
                let j = |v: f64, rng: &mut SplitMix64| v + rng.uniform(-2.0, 2.0);
                let (x1, y1) = (j(g.bbox.x1, rng), j(g.bbox.y1, rng));
                Detection {
                    bbox: BBox::new(x1, y1, x1.max(j(g.bbox.x2, rng)) + 0.5, y1.max(j(g.bbox.y2, rng)) + 0.5),
                    class_id: g.class_id,
                    score: rng.next_f64(),
                }
            } else {
                random_dets(rng, 1, 3)[0]
            }
        })
        .collect();
    ImageEval { detections, ground_truth }
}
