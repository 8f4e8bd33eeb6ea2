//! Reverse-mode tape over the kernels in [`super::kernels`].

use super::kernels::{self as k, ActivationKind, ConvSpec, NormForward, PoolKind};
use super::{Shape, Tensor};
use crate::error::{shape_err, MasfError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    BatchNormInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        fwd: NormForward,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        fwd: NormForward,
    },
    Act {
        x: Var,
        kind: ActivationKind,
    },
    /// SiLU with the forward sigmoid kept for the backward pass.
    Silu {
        x: Var,
        sigmoid: Vec<f64>,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        argmax: Option<Vec<usize>>,
    },
    Resize {
        x: Var,
        scale: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    WeightedSum {
        x: Var,
        weights: Option<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward values and, when gradients are enabled, enough of each
/// operation to run the backward pass.
///
/// A tape in *meta* mode skips arithmetic entirely: every op produces a
/// zero tensor of the right shape, so a forward pass yields shapes and FLOP
/// counts at the cost of allocation only.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    meta: bool,
    scope: String,
    flops: Vec<(String, u64)>,
    conv_flops: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            meta: false,
            scope: String::new(),
            flops: Vec::new(),
            conv_flops: 0,
        }
    }

    /// Forward-only tape; no backward state is retained.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Shape-and-FLOP tape: no arithmetic is performed.
    pub fn meta() -> Self {
        Self {
            grad_enabled: false,
            meta: true,
            ..Self::new()
        }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names the layer that subsequent FLOPs are attributed to.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// FLOPs per scope, in first-seen order.
    pub fn flops_by_scope(&self) -> &[(String, u64)] {
        &self.flops
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.iter().map(|(_, f)| f).sum()
    }

    pub fn conv_flops(&self) -> u64 {
        self.conv_flops
    }

    fn count(&mut self, flops: u64) {
        if flops == 0 {
            return;
        }
        match self.flops.iter_mut().find(|(s, _)| *s == self.scope) {
            Some((_, f)) => *f += flops,
            None => self.flops.push((self.scope.clone(), flops)),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let out_shape = k::conv2d_shape(self.shape(input), self.shape(weight), spec)?;
        if spec.has_bias != bias.is_some() {
            return Err(shape_err(format!(
                "conv spec has_bias={} but bias {}",
                spec.has_bias,
                if bias.is_some() { "given" } else { "missing" }
            )));
        }
        let per = spec.flops(out_shape.h, out_shape.w) * out_shape.n as u64;
        self.conv_flops += per;
        self.count(per + if bias.is_some() { out_shape.numel() as u64 } else { 0 });
        let value = if self.meta {
            Tensor::zeros(out_shape)
        } else {
            k::conv2d(
                self.value(input),
                self.value(weight),
                bias.map(|b| self.value(b)),
                spec,
            )?
        };
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                spec: *spec,
            },
            &ins,
        ))
    }

    pub fn batchnorm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let s = self.shape(x);
        self.count(2 * s.numel() as u64);
        let value = if self.meta {
            Tensor::zeros(s)
        } else {
            k::batchnorm_infer(
                self.value(x),
                mean,
                var,
                self.value(gamma).data(),
                self.value(beta).data(),
            )?
        };
        Ok(self.push(
            value,
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                var: var.to_vec(),
            },
            &[x, gamma, beta],
        ))
    }

    /// Normalizes with the batch's own statistics; also returns the batch
    /// mean and biased variance per channel.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let s = self.shape(x);
        self.count(2 * s.numel() as u64);
        if self.meta {
            let v = self.push(Tensor::zeros(s), Op::Leaf, &[]);
            return Ok((v, vec![0.0; s.c], vec![1.0; s.c]));
        }
        let fwd = k::batchnorm_train(self.value(x), self.value(gamma).data(), self.value(beta).data())?;
        let (mean, var) = (fwd.mean.clone(), fwd.var.clone());
        let value = fwd.output.clone();
        let v = self.push(value, Op::BatchNormTrain { x, gamma, beta, fwd }, &[x, gamma, beta]);
        Ok((v, mean, var))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x);
        self.count(2 * s.numel() as u64);
        if self.meta {
            if groups == 0 || s.c % groups != 0 {
                return Err(MasfError::Partition {
                    channels: s.c,
                    parts: groups,
                });
            }
            return Ok(self.push(Tensor::zeros(s), Op::Leaf, &[]));
        }
        let fwd = k::group_norm(self.value(x), groups, self.value(gamma).data(), self.value(beta).data())?;
        let value = fwd.output.clone();
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                fwd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Var {
        let s = self.shape(x);
        self.count(s.numel() as u64);
        let value = if self.meta {
            Tensor::zeros(s)
        } else {
            k::activation(self.value(x), kind)
        };
        self.push(value, Op::Act { x, kind }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, ActivationKind::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        if self.meta || !self.grad_enabled || !self.nodes[x.0].needs_grad {
            return self.activation(x, ActivationKind::Silu);
        }
        self.count(self.shape(x).numel() as u64);
        let (value, sigmoid) = k::silu_with_sigmoid(self.value(x));
        self.push(value, Op::Silu { x, sigmoid }, &[x])
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        self.activation(x, ActivationKind::SoftmaxOverChannels)
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let s = self.shape(x);
        self.count(s.numel() as u64);
        let (value, argmax) = if self.meta {
            (Tensor::zeros(k::pool_shape(s, kind)?), None)
        } else {
            k::pool(self.value(x), kind)?
        };
        Ok(self.push(value, Op::Pool { x, kind, argmax }, &[x]))
    }

    pub fn resize_nearest(&mut self, x: Var, scale: usize) -> Result<Var> {
        let s = self.shape(x);
        let value = if self.meta {
            if scale == 0 {
                return Err(MasfError::Config("resize scale must be >= 1".into()));
            }
            Tensor::zeros(Shape::new(s.n, s.c, s.h * scale, s.w * scale))
        } else {
            k::resize_nearest(self.value(x), scale)?
        };
        Ok(self.push(value, Op::Resize { x, scale }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let value = {
            let ts: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
            k::concat_channels(&ts)?
        };
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = k::slice_channels(self.value(x), start, len)?;
        Ok(self.push(value, Op::Slice { x, start }, &[x]))
    }

    pub fn split_channels(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.shape(x).c;
        if parts == 0 || c % parts != 0 {
            return Err(MasfError::Partition { channels: c, parts });
        }
        let len = c / parts;
        (0..parts)
            .map(|i| self.slice_channels(x, i * len, len))
            .collect()
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let os = k::matmul_batched_shape(sa, sb)?;
        self.count(2 * (sa.n * sa.c * sa.h * sa.w * sb.w) as u64);
        let value = if self.meta {
            Tensor::zeros(os)
        } else {
            k::matmul_batched(self.value(a), self.value(b))?
        };
        Ok(self.push(value, Op::Matmul { a, b }, &[a, b]))
    }

    /// Elementwise product; `b` may broadcast along axes of size 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        self.count(s.numel() as u64);
        let value = if self.meta {
            let sb = self.shape(b);
            let ok = s.dims().iter().zip(sb.dims().iter()).all(|(&x, &y)| x == y || y == 1);
            if !ok {
                return Err(shape_err(format!("cannot broadcast {sb} onto {s}")));
            }
            Tensor::zeros(s)
        } else {
            k::mul_broadcast(self.value(a), self.value(b))?
        };
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        self.count(s.numel() as u64);
        let value = if self.meta {
            if self.shape(b) != s {
                return Err(shape_err(format!("cannot add {s} and {}", self.shape(b))));
            }
            Tensor::zeros(s)
        } else {
            k::add(self.value(a), self.value(b))?
        };
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let s = self.shape(x);
        self.count(s.numel() as u64);
        let value = if self.meta {
            Tensor::zeros(s)
        } else {
            self.value(x).map(|v| scale * v + shift)
        };
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    /// Sum of all elements, as a 1×1×1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::WeightedSum { x, weights: None }, &[x])
    }

    /// Σ x ⊙ weights, as a 1×1×1×1 tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(shape_err(format!(
                "weights {} do not match {}",
                weights.shape(),
                self.shape(x)
            )));
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                x,
                weights: Some(weights),
            },
            &[x],
        ))
    }

    /// Runs the backward pass from one or more seeded outputs and returns
    /// the gradient of every node that needs one.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(shape_err(format!(
                    "seed gradient {} does not match value {}",
                    g.shape(),
                    self.shape(v)
                )));
            }
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let keep = matches!(node.op, Op::Leaf);
            self.backward_node(i, &g, &mut grads)?;
            if keep {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            } => {
                let need_input = self.needs(*input);
                let cg = k::conv2d_backward_select(self.value(*input), self.value(*weight), spec, g, need_input)?;
                if need_input {
                    accumulate(grads, *input, cg.input);
                }
                accumulate(grads, *weight, cg.weight);
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                mean,
                var,
            } => {
                let (dx, dg, db) =
                    k::batchnorm_infer_backward(self.value(*x), mean, var, self.value(*gamma).data(), g);
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, channel_vec(dg));
                accumulate(grads, *beta, channel_vec(db));
            }
            Op::BatchNormTrain { x, gamma, beta, fwd } => {
                let (dx, dg, db) = k::batchnorm_train_backward(fwd, self.value(*gamma).data(), g);
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, channel_vec(dg));
                accumulate(grads, *beta, channel_vec(db));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                fwd,
            } => {
                let (dx, dg, db) = k::group_norm_backward(fwd, *groups, self.value(*gamma).data(), g);
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, channel_vec(dg));
                accumulate(grads, *beta, channel_vec(db));
            }
            Op::Act { x, kind } => {
                let dx = k::activation_backward(self.value(*x), &node.value, *kind, g);
                accumulate(grads, *x, dx);
            }
            Op::Silu { x, sigmoid } => {
                accumulate(grads, *x, k::silu_backward_cached(self.value(*x), sigmoid, g));
            }
            Op::Pool { x, kind, argmax } => {
                let dx = k::pool_backward(self.shape(*x), *kind, argmax.as_deref(), g);
                accumulate(grads, *x, dx);
            }
            Op::Resize { x, scale } => {
                let dx = k::resize_nearest_backward(self.shape(*x), *scale, g);
                accumulate(grads, *x, dx);
            }
            Op::Concat { inputs } => {
                let mut start = 0;
                for v in inputs {
                    let c = self.shape(*v).c;
                    if self.needs(*v) {
                        accumulate(grads, *v, k::slice_channels(g, start, c)?);
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let s = self.shape(*x);
                let len = g.shape().c;
                let hw = s.hw();
                let mut dx = vec![0.0; s.numel()];
                for n in 0..s.n {
                    let dst = (n * s.c + start) * hw;
                    let src = n * len * hw;
                    dx[dst..dst + len * hw].copy_from_slice(&g.data()[src..src + len * hw]);
                }
                accumulate(grads, *x, Tensor::new(s, dx)?);
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, g.clone().reshape(self.shape(*x))?);
            }
            Op::Matmul { a, b } => {
                let (da, db) = k::matmul_batched_backward(self.value(*a), self.value(*b), g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Mul { a, b } => {
                let (da, db) = k::mul_broadcast_backward(self.value(*a), self.value(*b), g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Affine { x, scale } => {
                accumulate(grads, *x, g.map(|v| v * scale));
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.data()[0];
                let dx = match weights {
                    Some(w) => w.map(|v| v * gv),
                    None => Tensor::full(self.shape(*x), gv),
                };
                accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn channel_vec(v: Vec<f64>) -> Tensor {
    let c = v.len();
    Tensor::new(Shape::new(1, c, 1, 1), v).expect("channel vector")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
