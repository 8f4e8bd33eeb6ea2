mod common;

use common::random_tensor;
use masf_core::blocks::{Ctx, Mode, ModuleCheck};
use masf_core::network::{build_model, count_params, Level, Model, ModelConfig};
use masf_core::rng::SplitMix64;
use masf_core::tensor::{ConvSpec, Tape};
use masf_core::{MasfError, Shape, Tensor};

fn image(seed: u64, n: usize, size: usize) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(Shape::new(n, 3, size, size), |_, _, _, _| rng.next_f64())
}

#[test]
fn tiny_outputs_have_stride_sizes() {
    let m = build_model(&ModelConfig::tiny(3), 0).unwrap();
    let out = m.predict(&image(1, 1, 128)).unwrap();
    let sizes: Vec<_> = out.iter().map(|(l, t)| (*l, t.shape().h, t.shape().w, t.shape().c)).collect();
    assert_eq!(
        sizes,
        vec![(Level::P2, 32, 32, 7), (Level::P3, 16, 16, 7), (Level::P4, 8, 8, 7), (Level::P5, 4, 4, 7)]
    );
    assert!(out.values().all(|t| t.all_finite()));
}

#[test]
fn baseline_has_three_levels() {
    let m = build_model(&ModelConfig::baseline_tiny(2), 0).unwrap();
    let out = m.predict(&image(2, 1, 128)).unwrap();
    assert_eq!(out.keys().copied().collect::<Vec<_>>(), vec![Level::P3, Level::P4, Level::P5]);
}

#[test]
fn wrong_image_size_is_shape_error() {
    let m = build_model(&ModelConfig::tiny(3), 0).unwrap();
    let err = m.predict(&image(1, 1, 96)).unwrap_err();
    assert!(matches!(err, MasfError::Shape(_)));
    assert!(err.to_string().contains("128"));
}

#[test]
fn every_ladder_rung_builds_and_runs() {
    for (name, cfg) in ModelConfig::ablation_ladder(3) {
        let cfg = ModelConfig { image_size: 64, ..cfg };
        let m = build_model(&cfg, 3).unwrap();
        let out = m.predict(&image(4, 1, 64)).unwrap();
        assert_eq!(out.len(), cfg.levels.len(), "{name}");
        assert!(out.values().all(|t| t.all_finite()), "{name}");
    }
}

#[test]
fn batch_elements_are_independent_in_inference() {
    let m = build_model(&ModelConfig::tiny(3), 5).unwrap();
    let one = image(6, 1, 128);
    let two = Tensor::stack(&[one.clone(), one.clone()]).unwrap();
    let out = m.predict(&two).unwrap();
    for t in out.values() {
        let per = t.numel() / 2;
        assert_eq!(&t.data()[..per], &t.data()[per..]);
    }
}

#[test]
fn zeroed_residual_modules_reproduce_the_baseline() {
    let base = build_model(&ModelConfig::baseline_tiny(3), 11).unwrap();
    let cfg = ModelConfig {
        use_mfam: true,
        use_dasi: true,
        ..ModelConfig::baseline_tiny(3)
    };
    let mut full = build_model(&cfg, 11).unwrap();
    let shared = full.store.copy_matching(&base.store);
    assert_eq!(shared, base.store.len());
    for p in ["mfam", "dasi"] {
        full.store.zero_prefix(p);
    }
    let x = image(12, 2, 128);
    let a = base.predict(&x).unwrap();
    let b = full.predict(&x).unwrap();
    for (l, t) in &a {
        assert!(t.max_abs_diff(&b[l]) < 1e-12, "{l}");
    }
}

#[test]
fn parameter_counts() {
    // Single convolution with bias: k²·Cin·Cout + Cout.
    assert_eq!(ConvSpec::new(4, 8, 3, 1).with_bias(true).param_count(), 296);
    let base = build_model(&ModelConfig::baseline_tiny(3), 0).unwrap();
    let full = build_model(&ModelConfig::tiny(3), 0).unwrap();
    assert!(count_params(&full) > count_params(&base));
    let ladder: Vec<usize> = ModelConfig::ablation_ladder(3)
        .iter()
        .map(|(_, c)| build_model(c, 0).unwrap().count_params())
        .collect();
    assert!(ladder.windows(2).all(|w| w[1] > w[0]), "{ladder:?}");
}

#[test]
fn parameter_count_is_unchanged_by_forward() {
    let m = build_model(&ModelConfig::tiny(3), 0).unwrap();
    let before = (m.count_params(), m.store.len());
    let mut ctx = Ctx::new(&m.store, Tape::new(), Mode::Train);
    let x = ctx.tape.constant(image(1, 2, 128));
    m.forward(&mut ctx, x).unwrap();
    drop(ctx);
    assert_eq!((m.count_params(), m.store.len()), before);
}

#[test]
fn single_pointwise_conv_is_two_flops() {
    let spec = ConvSpec::new(1, 1, 1, 1);
    let mut t = Tape::meta();
    let x = t.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let w = t.constant(Tensor::zeros(spec.weight_shape()));
    t.conv2d(x, w, None, &spec).unwrap();
    assert_eq!(t.total_flops(), 2);
}

#[test]
fn flops_scale_quadratically_with_image_size() {
    let base = build_model(&ModelConfig::baseline_tiny(3), 0).unwrap();
    let (t1, c1) = base.flop_counts(64).unwrap();
    let (t2, c2) = base.flop_counts(128).unwrap();
    assert_eq!(t2, 4 * t1);
    assert_eq!(c2, 4 * c1);
    // The attention block convolves H×1 and 1×W descriptors, which grow
    // linearly; everything else in the full model is quadratic.
    let full = build_model(&ModelConfig::tiny(3), 0).unwrap();
    let (t1, c1) = full.flop_counts(64).unwrap();
    let (t2, c2) = full.flop_counts(128).unwrap();
    for r in [t2 as f64 / t1 as f64, c2 as f64 / c1 as f64] {
        assert!(r > 3.99 && r < 4.0, "{r}");
    }
    let no_iema = build_model(&ModelConfig { use_iema: false, ..ModelConfig::tiny(3) }, 0).unwrap();
    let (t1, _) = no_iema.flop_counts(64).unwrap();
    let (t2, _) = no_iema.flop_counts(128).unwrap();
    assert_eq!(t2, 4 * t1);
}

#[test]
fn full_model_costs_more_than_baseline() {
    let base = build_model(&ModelConfig::baseline_tiny(3), 0).unwrap();
    let full = build_model(&ModelConfig::tiny(3), 0).unwrap();
    assert!(full.estimate_gflops(128).unwrap() > base.estimate_gflops(128).unwrap());
    let table = full.format_layer_table().unwrap();
    assert!(table.contains("iema2") && table.contains("dasi5"));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { image_size: 100, ..ModelConfig::tiny(3) },
        ModelConfig { iema_groups: 5, ..ModelConfig::tiny(3) },
        ModelConfig { mfam_kernels: vec![3, 6], ..ModelConfig::tiny(3) },
        ModelConfig { num_classes: 0, ..ModelConfig::tiny(3) },
    ];
    for c in bad {
        assert!(matches!(Model::new(c, 0), Err(MasfError::Config(_))));
    }
}

#[test]
fn full_tiny_model_gradients() {
    let cfg = ModelConfig { image_size: 64, ..ModelConfig::tiny(2) };
    let m = build_model(&cfg, 21).unwrap();
    let mut rng = SplitMix64::new(22);
    let x = random_tensor(&mut rng, Shape::new(2, 3, 64, 64)).map(|v| 0.5 + 0.5 * v);
    let report = ModuleCheck {
        per_tensor: 2,
        seed: 23,
        ..ModuleCheck::default()
    }
    .run(&m.store, &[x], |ctx, v| Ok(m.forward(ctx, v[0])?.into_values().collect()))
    .unwrap();
    assert!(report.max_relative_error < 5e-3, "{report:?}");
}
