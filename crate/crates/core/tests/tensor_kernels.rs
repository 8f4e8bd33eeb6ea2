mod common;

use common::{max_rel_err, oracles, random_tensor};
use masf_core::rng::SplitMix64;
use masf_core::tensor::kernels::{self, sigmoid_scalar};
use masf_core::tensor::{
    grad_check, read_tensor, write_tensor, ActivationKind, ConvSpec, DType, PoolKind, Tape,
};
use masf_core::{Shape, Tensor};
use proptest::prelude::*;

#[test]
fn conv_matches_naive_loops() {
    let mut rng = SplitMix64::new(11);
    let x = random_tensor(&mut rng, Shape::new(2, 4, 8, 8));
    let spec = ConvSpec::new(4, 8, 3, 1);
    let w = random_tensor(&mut rng, spec.weight_shape());
    let got = kernels::conv2d(&x, &w, None, &spec).unwrap();
    assert!(max_rel_err(&got, &oracles::conv2d(&x, &w, None, &spec)) < 1e-6);
}

#[test]
fn conv_variants_match_naive_loops() {
    let mut rng = SplitMix64::new(12);
    let specs = [
        ConvSpec::new(3, 5, 3, 2).with_bias(true),
        ConvSpec::new(6, 4, 1, 1).with_bias(true),
        ConvSpec::depthwise(6, 1, 11),
        ConvSpec::depthwise(6, 7, 7),
        ConvSpec {
            groups: 2,
            ..ConvSpec::new(6, 4, 3, 1)
        },
    ];
    for spec in specs {
        let x = random_tensor(&mut rng, Shape::new(2, spec.in_channels, 9, 7));
        let w = random_tensor(&mut rng, spec.weight_shape());
        let b: Vec<f64> = (0..spec.out_channels).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let bias_t = Tensor::new(Shape::new(1, spec.out_channels, 1, 1), b.clone()).unwrap();
        let got = kernels::conv2d(&x, &w, spec.has_bias.then_some(&bias_t), &spec).unwrap();
        let want = oracles::conv2d(&x, &w, spec.has_bias.then_some(b.as_slice()), &spec);
        assert!(max_rel_err(&got, &want) < 1e-9, "{spec:?}");
    }
}

#[test]
fn global_pool_matches_scalar_loop() {
    let mut rng = SplitMix64::new(5);
    let x = random_tensor(&mut rng, Shape::new(2, 3, 6, 6));
    let (got, _) = kernels::pool(&x, PoolKind::GlobalAvg).unwrap();
    assert!(got.max_abs_diff(&oracles::global_avg(&x)) < 1e-7);
}

#[test]
fn resize_round_trip_by_subsampling() {
    let mut rng = SplitMix64::new(9);
    let x = random_tensor(&mut rng, Shape::new(1, 2, 3, 3));
    let up = kernels::resize_nearest(&x, 3).unwrap();
    let back = Tensor::from_fn(x.shape(), |n, c, h, w| up.at(n, c, 3 * h, 3 * w));
    assert_eq!(back, x);
}

#[test]
fn silu_matches_elementwise() {
    let mut rng = SplitMix64::new(21);
    let x = random_tensor(&mut rng, Shape::new(2, 3, 4, 5)).map(|v| 8.0 * v);
    let got = kernels::activation(&x, ActivationKind::Silu);
    let want = x.map(|v| v * oracles::sigmoid(v));
    assert!(got.max_abs_diff(&want) < 1e-7);
}

#[test]
fn group_norm_moments_are_zero_one() {
    let mut rng = SplitMix64::new(33);
    let x = random_tensor(&mut rng, Shape::new(2, 8, 5, 5)).map(|v| 3.0 * v + 1.0);
    let y = kernels::group_norm(&x, 4, &[1.0; 8], &[0.0; 8]).unwrap().output;
    for (m, v) in oracles::group_moments(&y, 4) {
        assert!(m.abs() < 1e-5, "mean {m}");
        assert!((v - 1.0).abs() < 1e-5, "var {v}");
    }
}

#[test]
fn concat_reads_back_sources() {
    let mut rng = SplitMix64::new(44);
    let parts: Vec<Tensor> = [2, 3, 1]
        .iter()
        .map(|&c| random_tensor(&mut rng, Shape::new(2, c, 4, 3)))
        .collect();
    let refs: Vec<&Tensor> = parts.iter().collect();
    let cat = kernels::concat_channels(&refs).unwrap();
    let mut base = 0;
    for p in &parts {
        let s = p.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        assert_eq!(cat.at(n, base + c, h, w), p.at(n, c, h, w));
                    }
                }
            }
        }
        base += s.c;
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SplitMix64::new(55);
    let a = random_tensor(&mut rng, Shape::new(3, 2, 4, 5));
    let b = random_tensor(&mut rng, Shape::new(3, 2, 5, 6));
    let got = kernels::matmul_batched(&a, &b).unwrap();
    assert!(max_rel_err(&got, &oracles::matmul(&a, &b)) < 1e-6);
}

#[test]
fn linear_map_gradient_is_exact() {
    let x = Tensor::new(Shape::new(1, 1, 1, 3), vec![0.5, -2.0, 3.0]).unwrap();
    let w = Tensor::new(Shape::new(1, 1, 1, 3), vec![1.5, 0.25, -1.0]).unwrap();
    let report = grad_check(&[w.clone()], 1e-4, |tape, v| tape.weighted_sum(v[0], x.clone())).unwrap();
    assert!(report.max_relative_error < 1e-10);
    let mut tape = Tape::new();
    let wv = tape.leaf(w, true);
    let y = tape.weighted_sum(wv, x.clone()).unwrap();
    let g = tape.backward(vec![(y, Tensor::scalar(1.0))]).unwrap();
    assert_eq!(g.get(wv).unwrap().data(), x.data());
}

#[test]
fn conv_sigmoid_sum_gradient() {
    let mut rng = SplitMix64::new(66);
    let x = random_tensor(&mut rng, Shape::new(1, 2, 5, 5));
    let spec = ConvSpec::new(2, 3, 3, 1).with_bias(true);
    let w = random_tensor(&mut rng, spec.weight_shape());
    let b = random_tensor(&mut rng, Shape::new(1, 3, 1, 1));
    let report = grad_check(&[x, w, b], 1e-4, |tape, v| {
        let y = tape.conv2d(v[0], v[1], Some(v[2]), &spec)?;
        let s = tape.sigmoid(y);
        Ok(tape.sum(s))
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn sigmoid_strictly_inside_unit_interval() {
    let mut rng = SplitMix64::new(77);
    for _ in 0..1000 {
        let v = rng.uniform(-30.0, 30.0);
        let s = sigmoid_scalar(v);
        assert!(s > 0.0 && s < 1.0);
    }
}

#[test]
fn softmax_columns_sum_to_one() {
    let mut rng = SplitMix64::new(78);
    let x = random_tensor(&mut rng, Shape::new(2, 7, 3, 3)).map(|v| 50.0 * v);
    let y = kernels::activation(&x, ActivationKind::SoftmaxOverChannels);
    for n in 0..2 {
        for h in 0..3 {
            for w in 0..3 {
                let s: f64 = (0..7).map(|c| y.at(n, c, h, w)).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn f32_serialization_rounds_to_single_precision() {
    let mut rng = SplitMix64::new(3);
    let x = random_tensor(&mut rng, Shape::new(1, 2, 3, 4));
    let mut buf = Vec::new();
    write_tensor(&mut buf, &x, DType::F32).unwrap();
    let back = read_tensor(&mut buf.as_slice()).unwrap();
    assert_eq!(back, x.map(|v| v as f32 as f64));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_then_concat_is_identity(seed in any::<u64>(), parts in 1usize..5, per in 1usize..4, h in 1usize..5) {
        let mut rng = SplitMix64::new(seed);
        let x = random_tensor(&mut rng, Shape::new(2, parts * per, h, 3));
        let pieces = kernels::split_channels(&x, parts).unwrap();
        let refs: Vec<&Tensor> = pieces.iter().collect();
        prop_assert_eq!(kernels::concat_channels(&refs).unwrap(), x);
    }

    #[test]
    fn kernels_are_deterministic(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let x = random_tensor(&mut rng, Shape::new(1, 4, 6, 6));
        let spec = ConvSpec::new(4, 4, 3, 2);
        let w = random_tensor(&mut rng, spec.weight_shape());
        let a = kernels::conv2d(&x, &w, None, &spec).unwrap();
        let b = kernels::conv2d(&x, &w, None, &spec).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}
