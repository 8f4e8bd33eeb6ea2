//! Annotation files.
//!
//! * VisDrone: CSV `x,y,w,h,score,category,truncation,occlusion`, pixel
//!   top-left boxes. Category 0 (ignored regions), score 0 and empty boxes
//!   are dropped and tallied.
//! * Internal: `class_id cx cy w h`, normalised to the image, written with six
//!   decimals.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MasfError, Result};
use crate::metrics::GroundTruth;
use crate::postproc::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationFormat {
    Visdrone,
    Internal,
}

impl std::str::FromStr for AnnotationFormat {
    type Err = MasfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visdrone" => Ok(Self::Visdrone),
            "internal" => Ok(Self::Internal),
            other => Err(MasfError::Config(format!(
                "unknown annotation format `{other}` (expected visdrone or internal)"
            ))),
        }
    }
}

/// Why rows were left out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DropTally {
    pub ignored_region: usize,
    pub zero_score: usize,
    pub empty_box: usize,
}

impl DropTally {
    pub fn total(&self) -> usize {
        self.ignored_region + self.zero_score + self.empty_box
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub gts: Vec<GroundTruth>,
    pub dropped: DropTally,
}

/// Reads and parses an annotation file for an image of `width × height`.
pub fn parse_annotations(path: &Path, format: AnnotationFormat, width: usize, height: usize) -> Result<Annotations> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(MasfError::MissingFile(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    parse_annotation_text(&text, &path.display().to_string(), format, width, height)
}

/// As [`parse_annotations`], on text already in memory; `file` names it in
/// errors.
pub fn parse_annotation_text(
    text: &str,
    file: &str,
    format: AnnotationFormat,
    width: usize,
    height: usize,
) -> Result<Annotations> {
    let (wf, hf) = (width as f64, height as f64);
    let mut gts = Vec::new();
    let mut dropped = DropTally::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fail = |reason: String| MasfError::Parse {
            file: file.to_string(),
            line: i + 1,
            text: raw.to_string(),
            reason,
        };
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s.trim().parse().map_err(|_| fail(format!("`{}` is not a number", s.trim())))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(fail(format!("`{}` is not finite", s.trim())))
            }
        };
        let int = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| fail(format!("`{}` is not a non-negative integer", s.trim())))
        };
        let bbox = match format {
            AnnotationFormat::Visdrone => {
                let f: Vec<&str> = line.trim_end_matches(',').split(',').collect();
                if f.len() < 6 {
                    return Err(fail(format!("expected at least 6 comma-separated fields, found {}", f.len())));
                }
                let (x, y, w, h) = (num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?);
                let score = num(f[4])?;
                let category = int(f[5])?;
                for extra in &f[6..] {
                    num(extra)?;
                }
                if category == 0 {
                    dropped.ignored_region += 1;
                    continue;
                }
                if score == 0.0 {
                    dropped.zero_score += 1;
                    continue;
                }
                if w <= 0.0 || h <= 0.0 {
                    dropped.empty_box += 1;
                    continue;
                }
                (category, BBox::new(x, y, x + w, y + h))
            }
            AnnotationFormat::Internal => {
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 5 {
                    return Err(fail(format!("expected 5 fields, found {}", f.len())));
                }
                let class_id = int(f[0])?;
                let (cx, cy, w, h) = (num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?);
                if [cx, cy, w, h].iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(fail("normalised coordinates must lie in [0, 1]".into()));
                }
                if w <= 0.0 || h <= 0.0 {
                    dropped.empty_box += 1;
                    continue;
                }
                (class_id, BBox::from_center(cx * wf, cy * hf, w * wf, h * hf))
            }
        };
        let (class_id, b) = bbox;
        let clipped = b.clip(wf, hf);
        if !clipped.is_valid() {
            dropped.empty_box += 1;
            continue;
        }
        gts.push(GroundTruth { bbox: clipped, class_id });
    }
    Ok(Annotations { gts, dropped })
}

/// Internal-format text for `gts` on a `width × height` image.
pub fn format_internal(gts: &[GroundTruth], width: usize, height: usize) -> String {
    let (wf, hf) = (width as f64, height as f64);
    let mut s = String::new();
    for g in gts {
        let (cx, cy) = g.bbox.center();
        let _ = writeln!(
            s,
            "{} {:.6} {:.6} {:.6} {:.6}",
            g.class_id,
            cx / wf,
            cy / hf,
            g.bbox.width() / wf,
            g.bbox.height() / hf
        );
    }
    s
}

/// VisDrone-format text; score 1, truncation and occlusion 0.
pub fn format_visdrone(gts: &[GroundTruth]) -> String {
    let mut s = String::new();
    for g in gts {
        let _ = writeln!(
            s,
            "{},{},{},{},1,{},0,0",
            g.bbox.x1,
            g.bbox.y1,
            g.bbox.width(),
            g.bbox.height(),
            g.class_id
        );
    }
    s
}

pub fn write_annotations(
    path: &Path,
    gts: &[GroundTruth],
    format: AnnotationFormat,
    width: usize,
    height: usize,
) -> Result<()> {
    let text = match format {
        AnnotationFormat::Internal => format_internal(gts, width, height),
        AnnotationFormat::Visdrone => format_visdrone(gts),
    };
    std::fs::write(path, text)?;
    Ok(())
}
