//! Datasets: lazily generated synthetic scenes, or image/annotation pairs
//! listed in a JSON manifest.
//!
//! Manifest layout, paths relative to the manifest file:
//!
//! ```json
//! {"format": "internal",
//!  "items": [{"image": "img/0001.png", "annotations": "ann/0001.txt", "split": "train"}]}
//! ```
//!
//! Images may be PNG or raw `.msft` tensors of shape (1, 3, H, W).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::annotations::{parse_annotations, write_annotations, AnnotationFormat, DropTally};
use super::letterbox::{letterbox, Letterbox};
use super::synth::{generate_scene, GenConfig};
use crate::error::{MasfError, Result};
use crate::metrics::GroundTruth;
use crate::tensor::{read_tensor, write_tensor, DType};
use crate::{Shape, Tensor};

/// One preprocessed image: (1, 3, S, S) plus boxes in letterboxed pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub gts: Vec<GroundTruth>,
    pub transform: Letterbox,
}

pub trait Dataset {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Sample>;
    /// Square side of every sample.
    fn image_size(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scene `i` is `generate_scene(gen, base_seed + i)`.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub gen: GenConfig,
    pub base_seed: u64,
    pub count: usize,
}

impl SyntheticDataset {
    pub fn new(gen: GenConfig, base_seed: u64, count: usize) -> Result<Self> {
        gen.validate()?;
        Ok(Self { gen, base_seed, count })
    }
}

impl Dataset for SyntheticDataset {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let seed = self.base_seed.wrapping_add(index as u64);
        let scene = generate_scene(&self.gen, seed)?;
        Ok(Sample {
            id: format!("synthetic-{seed}"),
            image: scene.image,
            gts: scene.gts,
            transform: Letterbox::IDENTITY,
        })
    }

    fn image_size(&self) -> usize {
        self.gen.image_size
    }
}

/// Fixed samples held in memory.
#[derive(Debug, Clone)]
pub struct InMemoryDataset {
    pub samples: Vec<Sample>,
    pub image_size: usize,
}

impl InMemoryDataset {
    pub fn collect(source: &dyn Dataset) -> Result<Self> {
        Ok(Self {
            samples: (0..source.len()).map(|i| source.get(i)).collect::<Result<_>>()?,
            image_size: source.image_size(),
        })
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        self.samples
            .get(index)
            .cloned()
            .ok_or_else(|| MasfError::Data(format!("sample {index} out of range ({})", self.samples.len())))
    }

    fn image_size(&self) -> usize {
        self.image_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub image: PathBuf,
    pub annotations: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: AnnotationFormat,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(MasfError::MissingFile(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&text).map_err(|e| MasfError::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Items of one split of a manifest, loaded on demand.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    root: PathBuf,
    format: AnnotationFormat,
    items: Vec<ManifestItem>,
    image_size: usize,
}

impl ManifestDataset {
    /// `split = None` keeps every item. `format` overrides the manifest's.
    pub fn open(path: &Path, split: Option<&str>, format: Option<AnnotationFormat>, image_size: usize) -> Result<Self> {
        let m = Manifest::load(path)?;
        let items: Vec<_> = m
            .items
            .into_iter()
            .filter(|it| split.is_none_or(|s| it.split == s))
            .collect();
        Ok(Self {
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            format: format.unwrap_or(m.format),
            items,
            image_size,
        })
    }

    pub fn items(&self) -> &[ManifestItem] {
        &self.items
    }

    /// Reads item `index` at its native resolution with drop tallies.
    pub fn get_raw(&self, index: usize) -> Result<(Tensor, Vec<GroundTruth>, DropTally)> {
        let item = self
            .items
            .get(index)
            .ok_or_else(|| MasfError::Data(format!("manifest item {index} out of range")))?;
        let image = load_image(&self.root.join(&item.image))?;
        let s = image.shape();
        let ann = parse_annotations(&self.root.join(&item.annotations), self.format, s.w, s.h)?;
        Ok((image, ann.gts, ann.dropped))
    }
}

impl Dataset for ManifestDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let (image, gts, dropped) = self.get_raw(index)?;
        if dropped.total() > 0 {
            log::debug!("{}: dropped {} annotation rows ({dropped:?})", self.items[index].annotations.display(), dropped.total());
        }
        let (image, lb) = letterbox(&image, self.image_size)?;
        let side = self.image_size as f64;
        let gts = gts
            .iter()
            .map(|g| GroundTruth {
                bbox: lb.forward(&g.bbox).clip(side, side),
                class_id: g.class_id,
            })
            .collect();
        Ok(Sample {
            id: self.items[index].image.display().to_string(),
            image,
            gts,
            transform: lb,
        })
    }

    fn image_size(&self) -> usize {
        self.image_size
    }
}

/// PNG (any colour type, converted to RGB in [0,1]) or `.msft`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(MasfError::MissingFile(path.to_path_buf()));
    }
    if path.extension().is_some_and(|e| e == "msft") {
        let t = read_tensor(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
        let s = t.shape();
        if s.n != 1 || s.c != 3 {
            return Err(MasfError::Data(format!("{}: expected a (1,3,H,W) tensor, got {s}", path.display())));
        }
        return Ok(t);
    }
    let img = image::open(path)
        .map_err(|e| MasfError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Converts the first image of a batch to 8-bit RGB.
pub fn to_rgb8(image: &Tensor) -> image::RgbImage {
    let s = image.shape();
    image::RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        let px = |c| (image.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Writes PNG, or `.msft` when the extension says so.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "msft") {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        return write_tensor(&mut f, image, DType::F64);
    }
    to_rgb8(image)
        .save(path)
        .map_err(|e| MasfError::Image(format!("{}: {e}", path.display())))
}

/// Writes `count` synthetic scenes (seeds `base_seed..`) as `.msft` images
/// with internal annotations plus a manifest, all under `dir`. Returns the
/// manifest path.
pub fn export_synthetic(dir: &Path, gen: &GenConfig, base_seed: u64, splits: &[(&str, usize)]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut items = Vec::new();
    let mut seed = base_seed;
    for &(split, count) in splits {
        for _ in 0..count {
            let scene = generate_scene(gen, seed)?;
            let image = PathBuf::from(format!("scene_{seed}.msft"));
            let annotations = PathBuf::from(format!("scene_{seed}.txt"));
            save_image(&scene.image, &dir.join(&image))?;
            write_annotations(
                &dir.join(&annotations),
                &scene.gts,
                AnnotationFormat::Internal,
                gen.image_size,
                gen.image_size,
            )?;
            items.push(ManifestItem {
                image,
                annotations,
                split: split.to_string(),
            });
            seed += 1;
        }
    }
    let path = dir.join("manifest.json");
    Manifest {
        format: AnnotationFormat::Internal,
        items,
    }
    .save(&path)?;
    Ok(path)
}
