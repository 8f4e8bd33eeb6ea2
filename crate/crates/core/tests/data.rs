mod common;

use masf_core::data::*;
use masf_core::metrics::GroundTruth;
use masf_core::postproc::BBox;
use masf_core::rng::SplitMix64;
use masf_core::{MasfError, Shape, Tensor};
use proptest::prelude::*;

#[test]
fn generator_is_deterministic() {
    let cfg = GenConfig::default();
    let a = generate_scene(&cfg, 0).unwrap();
    let b = generate_scene(&cfg, 0).unwrap();
    assert_eq!(a.image.data(), b.image.data());
    assert_eq!(a.gts, b.gts);
}

#[test]
fn sides_inside_configured_range_and_image() {
    let cfg = GenConfig::default();
    for seed in 0..200 {
        let s = generate_scene(&cfg, seed).unwrap();
        assert!((5..=25).contains(&s.gts.len()));
        for g in &s.gts {
            for side in [g.bbox.width(), g.bbox.height()] {
                assert!((2.56 - 1e-9..=10.24 + 1e-9).contains(&side), "side {side}");
            }
            assert!(g.bbox.x1 >= 0.0 && g.bbox.y1 >= 0.0 && g.bbox.x2 <= 128.0 && g.bbox.y2 <= 128.0);
        }
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn assert_frequencies(cfg: &GenConfig, probs: &[f64]) {
    let mut counts = vec![0usize; probs.len()];
    for seed in 0..1000 {
        for g in generate_scene(cfg, seed).unwrap().gts {
            counts[g.class_id] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    for (c, p) in counts.iter().zip(probs) {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?} vs {probs:?}");
    }
}

#[test]
fn class_frequencies_uniform() {
    let cfg = GenConfig {
        image_size: 32,
        ..GenConfig::default()
    };
    assert_frequencies(&cfg, &[1.0 / 3.0; 3]);
}

#[test]
fn class_frequencies_weighted() {
    let cfg = GenConfig {
        image_size: 32,
        num_classes: 4,
        class_weights: vec![4.0, 2.0, 1.0, 1.0],
        ..GenConfig::default()
    };
    assert_frequencies(&cfg, &[0.5, 0.25, 0.125, 0.125]);
}

#[test]
fn oversized_range_is_config_error() {
    for range in [(0.5, 1.2), (0.1, 0.05), (0.0, 0.1)] {
        let cfg = GenConfig {
            size_range: range,
            ..GenConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(MasfError::Config(_))));
    }
}

#[test]
fn internal_line_example() {
    let a = parse_annotation_text("1 0.5 0.5 0.25 0.25", "x.txt", AnnotationFormat::Internal, 128, 128).unwrap();
    assert_eq!(
        a.gts,
        vec![GroundTruth {
            bbox: BBox::new(48.0, 48.0, 80.0, 80.0),
            class_id: 1
        }]
    );
}

#[test]
fn visdrone_line_example() {
    let a = parse_annotation_text("10,20,30,40,1,4,0,0", "x.txt", AnnotationFormat::Visdrone, 640, 480).unwrap();
    assert_eq!(
        a.gts,
        vec![GroundTruth {
            bbox: BBox::new(10.0, 20.0, 40.0, 60.0),
            class_id: 4
        }]
    );
}

#[test]
fn malformed_line_reports_location() {
    let text = "0 0.5 0.5 0.1 0.1\n\n2 0.5 oops 0.1 0.1\n";
    match parse_annotation_text(text, "ann.txt", AnnotationFormat::Internal, 64, 64) {
        Err(MasfError::Parse { file, line, text, .. }) => {
            assert_eq!((file.as_str(), line, text.as_str()), ("ann.txt", 3, "2 0.5 oops 0.1 0.1"));
        }
        other => panic!("{other:?}"),
    }
    let e = parse_annotation_text("1,2,3", "v.txt", AnnotationFormat::Visdrone, 64, 64).unwrap_err();
    assert!(e.to_string().contains("v.txt:1"));
}

#[test]
fn missing_file_is_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let e = parse_annotations(&dir.path().join("none.txt"), AnnotationFormat::Internal, 8, 8).unwrap_err();
    assert!(matches!(e, MasfError::MissingFile(_)));
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn internal_round_trip_500() {
    // Centres and sizes on the 1e-6 normalised grid survive the 6-decimal text.
    let (w, h) = (1000usize, 1000usize);
    let mut rng = SplitMix64::new(11);
    let gts: Vec<GroundTruth> = (0..500)
        .map(|_| {
            let q = |rng: &mut SplitMix64, lo: u64, hi: u64| (lo + rng.below(hi - lo)) as f64 / 1000.0;
            let (hw, hh) = (q(&mut rng, 500, 49_500), q(&mut rng, 500, 49_500));
            let cx = hw + q(&mut rng, 0, 900_000);
            let cy = hh + q(&mut rng, 0, 900_000);
            GroundTruth {
                bbox: BBox::new(cx - hw, cy - hh, cx + hw, cy + hh),
                class_id: 1 + rng.below(10) as usize,
            }
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.txt");
    write_annotations(&path, &gts, AnnotationFormat::Internal, w, h).unwrap();
    let back = parse_annotations(&path, AnnotationFormat::Internal, w, h).unwrap();
    assert_eq!(back.dropped.total(), 0);
    assert_eq!(back.gts.len(), 500);
    for (a, b) in gts.iter().zip(&back.gts) {
        assert_eq!(a.class_id, b.class_id);
        for (u, v) in [(a.bbox.x1, b.bbox.x1), (a.bbox.y1, b.bbox.y1), (a.bbox.x2, b.bbox.x2), (a.bbox.y2, b.bbox.y2)] {
            assert!((u - v).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }

    let vpath = dir.path().join("v.txt");
    write_annotations(&vpath, &gts, AnnotationFormat::Visdrone, w, h).unwrap();
    let vback = parse_annotations(&vpath, AnnotationFormat::Visdrone, w, h).unwrap();
    assert_eq!(vback.gts.len(), 500);
    for (a, b) in gts.iter().zip(&vback.gts) {
        assert_eq!(a.class_id, b.class_id);
        assert!((a.bbox.x2 - b.bbox.x2).abs() < 1e-9 && (a.bbox.y2 - b.bbox.y2).abs() < 1e-9);
    }
}

#[test]
fn letterbox_identity_for_square_target() {
    let mut rng = SplitMix64::new(3);
    let img = common::random_tensor(&mut rng, Shape::new(1, 3, 64, 64));
    let (out, lb) = letterbox(&img, 64).unwrap();
    assert_eq!(lb, Letterbox::IDENTITY);
    assert_eq!(out, img);
}

#[test]
fn letterbox_wide_example() {
    let img = Tensor::full(Shape::new(1, 3, 100, 200), 0.25);
    let (out, lb) = letterbox(&img, 128).unwrap();
    assert_eq!(lb.scale, 0.64);
    assert_eq!((lb.pad_x, lb.pad_y), (0.0, 32.0));
    for y in 0..128 {
        let expect = if (32..96).contains(&y) { 0.25 } else { PAD_VALUE };
        assert!((out.at(0, 1, y, 64) - expect).abs() < 1e-12, "row {y}");
    }
}

proptest! {
    #[test]
    fn letterbox_box_round_trip(w in 16usize..400, h in 16usize..400, target_k in 1usize..8, seed in 0u64..1000) {
        let target = 32 * target_k;
        let lb = Letterbox::fit(w, h, target);
        // Oracle: fit scale and centred integer padding.
        let scale = (target as f64 / w as f64).min(target as f64 / h as f64);
        prop_assert_eq!(lb.scale, scale);
        let new_w = ((w as f64 * scale).round() as usize).min(target);
        prop_assert_eq!(lb.pad_x, ((target - new_w) / 2) as f64);
        let mut rng = SplitMix64::new(seed);
        for _ in 0..20 {
            let x1 = rng.uniform(0.0, w as f64 - 1.0);
            let y1 = rng.uniform(0.0, h as f64 - 1.0);
            let b = BBox::new(x1, y1, rng.uniform(x1, w as f64), rng.uniform(y1, h as f64));
            let f = lb.forward(&b);
            prop_assert!(f.x1 >= -1e-9 && f.y1 >= -1e-9 && f.x2 <= target as f64 + 1e-9 && f.y2 <= target as f64 + 1e-9);
            let back = lb.inverse(&f);
            for (u, v) in [(b.x1, back.x1), (b.y1, back.y1), (b.x2, back.x2), (b.y2, back.y2)] {
                prop_assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn parsed_boxes_are_valid(lines in proptest::collection::vec((0usize..5, -50.0f64..150.0, -50.0f64..150.0, -5.0f64..60.0, -5.0f64..60.0), 0..40)) {
        let text: String = lines
            .iter()
            .map(|(c, x, y, w, h)| format!("{x},{y},{w},{h},1,{c},0,0\n"))
            .collect();
        let a = parse_annotation_text(&text, "p", AnnotationFormat::Visdrone, 100, 80).unwrap();
        prop_assert_eq!(a.gts.len() + a.dropped.total(), lines.len());
        for g in &a.gts {
            prop_assert!(g.bbox.is_valid());
            prop_assert!(g.bbox.x1 >= 0.0 && g.bbox.y1 >= 0.0 && g.bbox.x2 <= 100.0 && g.bbox.y2 <= 80.0);
        }
    }
}

#[test]
fn manifest_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig {
        image_size: 64,
        ..GenConfig::default()
    };
    let path = export_synthetic(dir.path(), &gen, 100, &[("train", 3), ("val", 2)]).unwrap();
    let train = ManifestDataset::open(&path, Some("train"), None, 64).unwrap();
    let val = ManifestDataset::open(&path, Some("val"), None, 64).unwrap();
    assert_eq!((train.len(), val.len()), (3, 2));
    let synth = SyntheticDataset::new(gen, 100, 5).unwrap();
    let s = train.get(1).unwrap();
    let r = synth.get(1).unwrap();
    assert_eq!(s.image, r.image);
    assert_eq!(s.gts.len(), r.gts.len());
    for (a, b) in s.gts.iter().zip(&r.gts) {
        assert_eq!(a.class_id, b.class_id);
        assert!((a.bbox.x1 - b.bbox.x1).abs() < 1e-4 && (a.bbox.y2 - b.bbox.y2).abs() < 1e-4);
    }
    assert_eq!(val.get(0).unwrap().image, synth.get(3).unwrap().image);
}

#[test]
fn png_images_letterbox_to_target() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_fn(Shape::new(1, 3, 50, 100), |_, c, y, x| ((c * 40 + y + x) % 256) as f64 / 255.0);
    save_image(&img, &dir.path().join("a.png")).unwrap();
    std::fs::write(dir.path().join("a.txt"), "10,10,20,10,1,2,0,0\n0,0,5,5,1,0,0,0\n").unwrap();
    Manifest {
        format: AnnotationFormat::Visdrone,
        items: vec![ManifestItem {
            image: "a.png".into(),
            annotations: "a.txt".into(),
            split: "val".into(),
        }],
    }
    .save(&dir.path().join("m.json"))
    .unwrap();
    let loaded = load_image(&dir.path().join("a.png")).unwrap();
    assert!(loaded.max_abs_diff(&img) < 1e-12);
    let ds = ManifestDataset::open(&dir.path().join("m.json"), None, None, 64).unwrap();
    let s = ds.get(0).unwrap();
    assert_eq!(s.image.shape(), Shape::new(1, 3, 64, 64));
    assert_eq!(s.gts.len(), 1);
    assert_eq!(s.gts[0].bbox, BBox::new(6.4, 22.4, 19.2, 28.8));
    assert!(matches!(load_image(&dir.path().join("b.png")), Err(MasfError::MissingFile(_))));
}
