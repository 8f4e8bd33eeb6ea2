//! Synthetic scenes, annotation files, letterboxing and datasets.

pub mod annotations;
pub mod dataset;
pub mod letterbox;
pub mod synth;

pub use annotations::{
    format_internal, format_visdrone, parse_annotation_text, parse_annotations, write_annotations, AnnotationFormat,
    Annotations, DropTally,
};
pub use dataset::{
    export_synthetic, load_image, save_image, to_rgb8, Dataset, InMemoryDataset, Manifest, ManifestDataset,
    ManifestItem, Sample, SyntheticDataset,
};
pub use letterbox::{letterbox, resize_bilinear, Letterbox, PAD_VALUE};
pub use synth::{generate_scene, GenConfig, Scene};
