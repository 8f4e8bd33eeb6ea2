use masf_core::tensor::ConvSpec;
use masf_core::{Shape, Tensor};

/// Direct seven-loop convolution with zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, spec: &ConvSpec) -> Tensor {
    let s = x.shape();
    let oh = (s.h + 2 * spec.padding_h - spec.kernel_h) / spec.stride + 1;
    let ow = (s.w + 2 * spec.padding_w - spec.kernel_w) / spec.stride + 1;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let mut out = Tensor::zeros(Shape::new(s.n, spec.out_channels, oh, ow));
    for n in 0..s.n {
        for co in 0..spec.out_channels {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..cin_g {
                        for ky in 0..spec.kernel_h {
                            for kx in 0..spec.kernel_w {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding_h as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding_w as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += w.at(co, ci, ky, kx)
                                    * x.at(n, g * cin_g + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

pub fn global_avg(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        let mut acc = 0.0;
        for h in 0..s.h {
            for w in 0..s.w {
                acc += x.at(n, c, h, w);
            }
        }
        acc / (s.h * s.w) as f64
    })
}

pub fn avg_along_h(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, 1, s.w), |n, c, _, w| {
        (0..s.h).map(|h| x.at(n, c, h, w)).sum::<f64>() / s.h as f64
    })
}

pub fn avg_along_w(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h, 1), |n, c, h, _| {
        (0..s.w).map(|w| x.at(n, c, h, w)).sum::<f64>() / s.w as f64
    })
}

pub fn max_pool2(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h / 2, s.w / 2), |n, c, h, w| {
        let mut m = f64::NEG_INFINITY;
        for dy in 0..2 {
            for dx in 0..2 {
                m = m.max(x.at(n, c, 2 * h + dy, 2 * w + dx));
            }
        }
        m
    })
}

pub fn resize_nearest(x: &Tensor, scale: usize) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h * scale, s.w * scale), |n, c, h, w| {
        x.at(n, c, h / scale, w / scale)
    })
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softmax_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(s, |n, c, h, w| {
        let z: f64 = (0..s.c).map(|k| x.at(n, k, h, w).exp()).sum();
        x.at(n, c, h, w).exp() / z
    })
}

/// Per-(sample, group) mean and biased variance.
pub fn group_moments(x: &Tensor, groups: usize) -> Vec<(f64, f64)> {
    let s = x.shape();
    let cpg = s.c / groups;
    let mut out = Vec::new();
    for n in 0..s.n {
        for g in 0..groups {
            let mut vals = Vec::new();
            for c in g * cpg..(g + 1) * cpg {
                for h in 0..s.h {
                    for w in 0..s.w {
                        vals.push(x.at(n, c, h, w));
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            out.push((m, v));
        }
    }
    out
}

pub fn batchnorm_infer(x: &Tensor, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64]) -> Tensor {
    Tensor::from_fn(x.shape(), |n, c, h, w| {
        gamma[c] * (x.at(n, c, h, w) - mean[c]) / (var[c] + 1e-5).sqrt() + beta[c]
    })
}

/// Triple-loop batched matmul over (n, c) batches of (h × w) matrices.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    Tensor::from_fn(Shape::new(sa.n, sa.c, sa.h, sb.w), |n, c, i, j| {
        (0..sa.w).map(|k| a.at(n, c, i, k) * b.at(n, c, k, j)).sum()
    })
}

/// Batch statistics per channel over (N, H, W), biased variance.
pub fn batchnorm_train(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    let s = x.shape();
    let count = (s.n * s.h * s.w) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    mean[c] += x.at(n, c, h, w) / count;
                }
            }
        }
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    var[c] += (x.at(n, c, h, w) - mean[c]).powi(2) / count;
                }
            }
        }
    }
    batchnorm_infer(x, &mean, &var, gamma, beta)
}

pub fn group_norm(x: &Tensor, groups: usize, gamma: &[f64], beta: &[f64]) -> Tensor {
    let s = x.shape();
    let cpg = s.c / groups;
    let moments = group_moments(x, groups);
    Tensor::from_fn(s, |n, c, h, w| {
        let (m, v) = moments[n * groups + c / cpg];
        gamma[c] * (x.at(n, c, h, w) - m) / (v + 1e-5).sqrt() + beta[c]
    })
}
