//! Forward and backward kernels over [`Tensor`].
//!
//! Every function here is pure: inputs are borrowed immutably and a fresh
//! tensor is returned. Backward kernels take the forward inputs (and, where
//! cheaper, the forward output) plus the upstream gradient.

use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};
use crate::error::{config_err, shape_err, MasfError, Result};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding_h: usize,
    pub padding_w: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Dense square convolution with "same" padding `k / 2`.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding_h: kernel / 2,
            padding_w: kernel / 2,
            groups: 1,
            has_bias: false,
        }
    }

    /// Depthwise convolution (`groups == in == out`) with same padding.
    pub fn depthwise(channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            kernel_h,
            kernel_w,
            stride: 1,
            padding_h: kernel_h / 2,
            padding_w: kernel_w / 2,
            groups: channels,
            has_bias: true,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(config_err(format!("conv with zero channels or groups: {self:?}")));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(config_err(format!("conv with zero kernel or stride: {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(config_err(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding_h;
        let pw = w + 2 * self.padding_w;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(shape_err(format!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// 2·k_h·k_w·(C_in/groups)·C_out·H_out·W_out for one sample.
    pub fn flops(&self, out_h: usize, out_w: usize) -> u64 {
        2 * (self.kernel_h * self.kernel_w * (self.in_channels / self.groups) * self.out_channels)
            as u64
            * (out_h * out_w) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    /// Mean over H and W, output (N, C, 1, 1).
    GlobalAvg,
    /// Mean over rows, output (N, C, 1, W).
    AvgAlongH,
    /// Mean over columns, output (N, C, H, 1).
    AvgAlongW,
    /// 2×2 max with stride 2, floor on odd sizes.
    Stride2Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Sigmoid,
    Silu,
    SoftmaxOverChannels,
}

/// Normalization flavour together with its parameters.
#[derive(Debug, Clone, Copy)]
pub enum NormKind<'a> {
    BatchNormInfer {
        mean: &'a [f64],
        var: &'a [f64],
        gamma: &'a [f64],
        beta: &'a [f64],
    },
    GroupNorm {
        groups: usize,
        gamma: &'a [f64],
        beta: &'a [f64],
    },
}

fn check_conv(input: Shape, weight: Shape, spec: &ConvSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    if input.c != spec.in_channels {
        return Err(shape_err(format!(
            "conv input {input} has {} channels, spec expects {}",
            input.c, spec.in_channels
        )));
    }
    if weight != spec.weight_shape() {
        return Err(shape_err(format!(
            "conv weight {weight} does not match expected {} for input {input}",
            spec.weight_shape()
        )));
    }
    spec.output_hw(input.h, input.w)
}

// --- gemm --------------------------------------------------------------------

/// c (m×n) (+)= op(a) (m×k) · op(b) (k×n), all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths checked above; strides describe in-bounds
    // row-major (or transposed) layouts of exactly those lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// --- convolution -------------------------------------------------------------

struct ConvGeom {
    cin_g: usize,
    cout_g: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kk: usize,
}

impl ConvGeom {
    fn new(input: Shape, spec: &ConvSpec, oh: usize, ow: usize) -> Self {
        Self {
            cin_g: spec.in_channels / spec.groups,
            cout_g: spec.out_channels / spec.groups,
            h: input.h,
            w: input.w,
            oh,
            ow,
            kk: spec.kernel_h * spec.kernel_w,
        }
    }

    fn is_pointwise(&self, spec: &ConvSpec) -> bool {
        spec.kernel_h == 1
            && spec.kernel_w == 1
            && spec.stride == 1
            && spec.padding_h == 0
            && spec.padding_w == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + k − pad` lies in
/// `0..w`, as a half-open range.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if w + pad > k { ((w - 1 + pad - k) / stride + 1).min(ow) } else { 0 };
    (lo.min(ow), hi.max(lo.min(ow)))
}

/// Input column of output column `ox` (only valid inside `valid_range`).
#[inline]
fn in_col(ox: usize, k: usize, pad: usize, stride: usize) -> usize {
    ox * stride + k - pad
}

/// `dst[ox] = f(dst[ox], line[ix(ox)])` over the valid output range.
#[inline]
fn zip_strided(dst: &mut [f64], line: &[f64], lo: usize, hi: usize, ix0: usize, stride: usize, f: impl Fn(&mut f64, f64)) {
    if stride == 1 {
        dst[lo..hi].iter_mut().zip(&line[ix0..ix0 + hi - lo]).for_each(|(d, &v)| f(d, v));
    } else {
        dst[lo..hi].iter_mut().zip(line[ix0..].iter().step_by(stride)).for_each(|(d, &v)| f(d, v));
    }
}

/// Visits `(a[ox], line[ix(ox)])` over the valid output range.
#[inline]
fn zip_strided_ref(a: &[f64], line: &[f64], lo: usize, hi: usize, ix0: usize, stride: usize, mut f: impl FnMut(f64, f64)) {
    if stride == 1 {
        a[lo..hi].iter().zip(&line[ix0..ix0 + hi - lo]).for_each(|(&x, &v)| f(x, v));
    } else {
        a[lo..hi].iter().zip(line[ix0..].iter().step_by(stride)).for_each(|(&x, &v)| f(x, v));
    }
}

/// `line[ix(ox)] = f(line[ix(ox)], src[ox])` over the valid output range.
#[inline]
fn scatter_strided(line: &mut [f64], src: &[f64], lo: usize, hi: usize, ix0: usize, stride: usize, f: impl Fn(&mut f64, f64)) {
    if stride == 1 {
        line[ix0..ix0 + hi - lo].iter_mut().zip(&src[lo..hi]).for_each(|(d, &v)| f(d, v));
    } else {
        line[ix0..].iter_mut().step_by(stride).zip(&src[lo..hi]).for_each(|(d, &v)| f(d, v));
    }
}

/// Unfolds `cin_g` channels starting at `src` into a (cin_g·kh·kw) × (oh·ow) matrix.
fn im2col(src: &[f64], g: &ConvGeom, spec: &ConvSpec, col: &mut [f64]) {
    let p = g.oh * g.ow;
    for ci in 0..g.cin_g {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..spec.kernel_h {
            for kx in 0..spec.kernel_w {
                let row = (ci * g.kk + ky * spec.kernel_w + kx) * p;
                let (lo, hi) = valid_range(kx, spec.padding_w, spec.stride, g.w, g.ow);
                for oy in 0..g.oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding_h as isize;
                    let dst = &mut col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let line = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = in_col(lo, kx, spec.padding_w, spec.stride);
                    zip_strided(dst, line, lo, hi, ix0, spec.stride, |d, v| *d = v);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dst`.
fn col2im(col: &[f64], g: &ConvGeom, spec: &ConvSpec, dst: &mut [f64]) {
    let p = g.oh * g.ow;
    for ci in 0..g.cin_g {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..spec.kernel_h {
            for kx in 0..spec.kernel_w {
                let row = (ci * g.kk + ky * spec.kernel_w + kx) * p;
                let (lo, hi) = valid_range(kx, spec.padding_w, spec.stride, g.w, g.ow);
                for oy in 0..g.oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    if lo == hi {
                        continue;
                    }
                    let src = &col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = in_col(lo, kx, spec.padding_w, spec.stride);
                    scatter_strided(line, src, lo, hi, ix0, spec.stride, |d, v| *d += v);
                }
            }
        }
    }
}

/// Output shape of a convolution, validating every operand.
pub fn conv2d_shape(input: Shape, weight: Shape, spec: &ConvSpec) -> Result<Shape> {
    let (oh, ow) = check_conv(input, weight, spec)?;
    Ok(Shape::new(input.n, spec.out_channels, oh, ow))
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let (oh, ow) = check_conv(input.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.numel() != spec.out_channels {
            return Err(shape_err(format!(
                "bias {} does not match {} output channels",
                b.shape(),
                spec.out_channels
            )));
        }
    }
    let s = input.shape();
    let g = ConvGeom::new(s, spec, oh, ow);
    let p = oh * ow;
    let out_shape = Shape::new(s.n, spec.out_channels, oh, ow);
    let mut out = vec![0.0; out_shape.numel()];
    let x = input.data();
    let wt = weight.data();

    if g.cin_g == 1 && g.cout_g == 1 {
        depthwise_forward(x, wt, &g, spec, s.n, &mut out);
    } else {
        let pointwise = g.is_pointwise(spec);
        let mut col = if pointwise { Vec::new() } else { vec![0.0; g.cin_g * g.kk * p] };
        for n in 0..s.n {
            for gi in 0..spec.groups {
                let src_off = (n * s.c + gi * g.cin_g) * g.h * g.w;
                let src = &x[src_off..src_off + g.cin_g * g.h * g.w];
                let wg = &wt[gi * g.cout_g * g.cin_g * g.kk..(gi + 1) * g.cout_g * g.cin_g * g.kk];
                let dst_off = (n * spec.out_channels + gi * g.cout_g) * p;
                let dst = &mut out[dst_off..dst_off + g.cout_g * p];
                let cols: &[f64] = if pointwise {
                    src
                } else {
                    im2col(src, &g, spec, &mut col);
                    &col
                };
                gemm(g.cout_g, g.cin_g * g.kk, p, wg, false, cols, false, dst, false);
            }
        }
    }
    if let Some(b) = bias {
        let b = b.data();
        for n in 0..s.n {
            for co in 0..spec.out_channels {
                let off = (n * spec.out_channels + co) * p;
                out[off..off + p].iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    Tensor::new(out_shape, out)
}

fn depthwise_forward(x: &[f64], wt: &[f64], g: &ConvGeom, spec: &ConvSpec, batch: usize, out: &mut [f64]) {
    let c = spec.out_channels;
    for n in 0..batch {
        for ch in 0..c {
            let plane = &x[(n * c + ch) * g.h * g.w..(n * c + ch + 1) * g.h * g.w];
            let k = &wt[ch * g.kk..(ch + 1) * g.kk];
            let dst = &mut out[(n * c + ch) * g.oh * g.ow..(n * c + ch + 1) * g.oh * g.ow];
            for ky in 0..spec.kernel_h {
                for kx in 0..spec.kernel_w {
                    let wv = k[ky * spec.kernel_w + kx];
                    let (lo, hi) = valid_range(kx, spec.padding_w, spec.stride, g.w, g.ow);
                    if wv == 0.0 || lo == hi {
                        continue;
                    }
                    let ix0 = in_col(lo, kx, spec.padding_w, spec.stride);
                    for oy in 0..g.oh {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding_h as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let line = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        zip_strided(drow, line, lo, hi, ix0, spec.stride, |d, v| *d += wv * v);
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    conv2d_backward_select(input, weight, spec, grad_out, true)
}

/// As [`conv2d_backward`]; when `need_input` is false the input gradient is
/// left at zero and not computed.
pub fn conv2d_backward_select(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let (oh, ow) = check_conv(input.shape(), weight.shape(), spec)?;
    let s = input.shape();
    let go_shape = Shape::new(s.n, spec.out_channels, oh, ow);
    if grad_out.shape() != go_shape {
        return Err(shape_err(format!(
            "conv grad {} does not match output {go_shape}",
            grad_out.shape()
        )));
    }
    let g = ConvGeom::new(s, spec, oh, ow);
    let p = oh * ow;
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut dx = vec![0.0; s.numel()];
    let mut dw = vec![0.0; wt.len()];

    if g.cin_g == 1 && g.cout_g == 1 {
        depthwise_backward(x, wt, go, &g, spec, s.n, &mut dx, &mut dw);
    } else {
        let kdim = g.cin_g * g.kk;
        let pointwise = g.is_pointwise(spec);
        let mut col = if pointwise { Vec::new() } else { vec![0.0; kdim * p] };
        let mut dcol = if pointwise || !need_input { Vec::new() } else { vec![0.0; kdim * p] };
        for n in 0..s.n {
            for gi in 0..spec.groups {
                let src_off = (n * s.c + gi * g.cin_g) * g.h * g.w;
                let src = &x[src_off..src_off + g.cin_g * g.h * g.w];
                let wrange = gi * g.cout_g * kdim..(gi + 1) * g.cout_g * kdim;
                let go_off = (n * spec.out_channels + gi * g.cout_g) * p;
                let gog = &go[go_off..go_off + g.cout_g * p];
                let cols: &[f64] = if pointwise {
                    src
                } else {
                    im2col(src, &g, spec, &mut col);
                    &col
                };
                // dW (cout_g × kdim) += gO (cout_g × p) · colᵀ (p × kdim)
                gemm(g.cout_g, p, kdim, gog, false, cols, true, &mut dw[wrange.clone()], true);
                if !need_input {
                    continue;
                }
                // dcol (kdim × p) = Wᵀ (kdim × cout_g) · gO (cout_g × p)
                let dst = &mut dx[src_off..src_off + g.cin_g * g.h * g.w];
                if pointwise {
                    gemm(kdim, g.cout_g, p, &wt[wrange], true, gog, false, dst, true);
                } else {
                    gemm(kdim, g.cout_g, p, &wt[wrange], true, gog, false, &mut dcol, false);
                    col2im(&dcol, &g, spec, dst);
                }
            }
        }
    }

    let bias = spec.has_bias.then(|| {
        let mut db = vec![0.0; spec.out_channels];
        for n in 0..s.n {
            for (co, d) in db.iter_mut().enumerate() {
                let off = (n * spec.out_channels + co) * p;
                *d += go[off..off + p].iter().sum::<f64>();
            }
        }
        Tensor::new(Shape::new(1, spec.out_channels, 1, 1), db).expect("bias shape")
    });
    Ok(ConvGrads {
        input: Tensor::new(s, dx)?,
        weight: Tensor::new(weight.shape(), dw)?,
        bias,
    })
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward(
    x: &[f64],
    wt: &[f64],
    go: &[f64],
    g: &ConvGeom,
    spec: &ConvSpec,
    batch: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    let c = spec.out_channels;
    for n in 0..batch {
        for ch in 0..c {
            let pr = (n * c + ch) * g.h * g.w..(n * c + ch + 1) * g.h * g.w;
            let plane = &x[pr.clone()];
            let dplane = &mut dx[pr];
            let gplane = &go[(n * c + ch) * g.oh * g.ow..(n * c + ch + 1) * g.oh * g.ow];
            for ky in 0..spec.kernel_h {
                for kx in 0..spec.kernel_w {
                    let ki = ch * g.kk + ky * spec.kernel_w + kx;
                    let wv = wt[ki];
                    let (lo, hi) = valid_range(kx, spec.padding_w, spec.stride, g.w, g.ow);
                    if lo == hi {
                        continue;
                    }
                    let ix0 = in_col(lo, kx, spec.padding_w, spec.stride);
                    let mut acc = 0.0;
                    for oy in 0..g.oh {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding_h as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = iy as usize * g.w;
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        let line = &plane[row..row + g.w];
                        let mut part = 0.0;
                        zip_strided_ref(grow, line, lo, hi, ix0, spec.stride, |gv, v| part += gv * v);
                        acc += part;
                        let dline = &mut dplane[row..row + g.w];
                        scatter_strided(dline, grow, lo, hi, ix0, spec.stride, |d, gv| *d += gv * wv);
                    }
                    dw[ki] += acc;
                }
            }
        }
    }
}

// --- pooling -----------------------------------------------------------------

pub fn pool_shape(s: Shape, kind: PoolKind) -> Result<Shape> {
    Ok(match kind {
        PoolKind::GlobalAvg => Shape::new(s.n, s.c, 1, 1),
        PoolKind::AvgAlongH => Shape::new(s.n, s.c, 1, s.w),
        PoolKind::AvgAlongW => Shape::new(s.n, s.c, s.h, 1),
        PoolKind::Stride2Max => {
            if s.h < 2 || s.w < 2 {
                return Err(MasfError::Dimension(format!(
                    "stride-2 max pooling needs H and W >= 2, got {s}"
                )));
            }
            Shape::new(s.n, s.c, s.h / 2, s.w / 2)
        }
    })
}

/// Returns the pooled tensor and, for max pooling, the flat argmax index of
/// every output element.
pub fn pool(input: &Tensor, kind: PoolKind) -> Result<(Tensor, Option<Vec<usize>>)> {
    let s = input.shape();
    let os = pool_shape(s, kind)?;
    let x = input.data();
    let mut out = vec![0.0; os.numel()];
    let mut argmax = None;
    for nc in 0..s.n * s.c {
        let plane = &x[nc * s.hw()..(nc + 1) * s.hw()];
        match kind {
            PoolKind::GlobalAvg => {
                out[nc] = plane.iter().sum::<f64>() / s.hw() as f64;
            }
            PoolKind::AvgAlongH => {
                let dst = &mut out[nc * s.w..(nc + 1) * s.w];
                for row in plane.chunks_exact(s.w) {
                    dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                dst.iter_mut().for_each(|d| *d /= s.h as f64);
            }
            PoolKind::AvgAlongW => {
                for (y, row) in plane.chunks_exact(s.w).enumerate() {
                    out[nc * s.h + y] = row.iter().sum::<f64>() / s.w as f64;
                }
            }
            PoolKind::Stride2Max => {
                let idx = argmax.get_or_insert_with(|| vec![0usize; os.numel()]);
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (2 * oy + dy) * s.w + 2 * ox + dx;
                                if plane[i] > best {
                                    best = plane[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = nc * os.hw() + oy * os.w + ox;
                        out[o] = best;
                        idx[o] = nc * s.hw() + best_i;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(os, out)?, argmax))
}

pub fn pool_backward(
    input_shape: Shape,
    kind: PoolKind,
    argmax: Option<&[usize]>,
    grad_out: &Tensor,
) -> Tensor {
    let s = input_shape;
    let g = grad_out.data();
    let mut dx = vec![0.0; s.numel()];
    for nc in 0..s.n * s.c {
        let plane = &mut dx[nc * s.hw()..(nc + 1) * s.hw()];
        match kind {
            PoolKind::GlobalAvg => {
                let v = g[nc] / s.hw() as f64;
                plane.iter_mut().for_each(|d| *d = v);
            }
            PoolKind::AvgAlongH => {
                let src = &g[nc * s.w..(nc + 1) * s.w];
                for row in plane.chunks_exact_mut(s.w) {
                    row.iter_mut()
                        .zip(src)
                        .for_each(|(d, v)| *d = v / s.h as f64);
                }
            }
            PoolKind::AvgAlongW => {
                for (y, row) in plane.chunks_exact_mut(s.w).enumerate() {
                    let v = g[nc * s.h + y] / s.w as f64;
                    row.iter_mut().for_each(|d| *d = v);
                }
            }
            PoolKind::Stride2Max => {}
        }
    }
    if kind == PoolKind::Stride2Max {
        let idx = argmax.expect("max pooling backward needs argmax");
        for (o, &i) in idx.iter().enumerate() {
            dx[i] += g[o];
        }
    }
    Tensor::new(s, dx).expect("pool grad shape")
}

// --- resampling --------------------------------------------------------------

pub fn resize_nearest(input: &Tensor, scale: usize) -> Result<Tensor> {
    if scale == 0 {
        return Err(config_err("resize scale must be >= 1"));
    }
    if scale == 1 {
        return Ok(input.clone());
    }
    let s = input.shape();
    let os = Shape::new(s.n, s.c, s.h * scale, s.w * scale);
    let x = input.data();
    let mut out = Vec::with_capacity(os.numel());
    for nc in 0..s.n * s.c {
        let plane = &x[nc * s.hw()..(nc + 1) * s.hw()];
        for y in 0..os.h {
            let row = &plane[(y / scale) * s.w..(y / scale + 1) * s.w];
            for &v in row {
                for _ in 0..scale {
                    out.push(v);
                }
            }
        }
    }
    Tensor::new(os, out)
}

pub fn resize_nearest_backward(input_shape: Shape, scale: usize, grad_out: &Tensor) -> Tensor {
    let s = input_shape;
    let os = grad_out.shape();
    let g = grad_out.data();
    let mut dx = vec![0.0; s.numel()];
    for nc in 0..s.n * s.c {
        for y in 0..os.h {
            for x in 0..os.w {
                dx[nc * s.hw() + (y / scale) * s.w + x / scale] += g[nc * os.hw() + y * os.w + x];
            }
        }
    }
    Tensor::new(s, dx).expect("resize grad shape")
}

// --- activations -------------------------------------------------------------

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(input: &Tensor, kind: ActivationKind) -> Tensor {
    match kind {
        ActivationKind::Sigmoid => input.map(sigmoid_scalar),
        ActivationKind::Silu => input.map(|x| x * sigmoid_scalar(x)),
        ActivationKind::SoftmaxOverChannels => softmax_channels(input),
    }
}

fn softmax_channels(input: &Tensor) -> Tensor {
    let s = input.shape();
    let x = input.data();
    let mut out = vec![0.0; s.numel()];
    let hw = s.hw();
    for n in 0..s.n {
        let base = n * s.c * hw;
        for p in 0..hw {
            let m = (0..s.c)
                .map(|c| x[base + c * hw + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..s.c {
                let e = (x[base + c * hw + p] - m).exp();
                out[base + c * hw + p] = e;
                z += e;
            }
            for c in 0..s.c {
                out[base + c * hw + p] /= z;
            }
        }
    }
    Tensor::new(s, out).expect("softmax shape")
}

/// SiLU forward that also returns σ(x) for reuse in the backward pass.
pub fn silu_with_sigmoid(input: &Tensor) -> (Tensor, Vec<f64>) {
    let sig: Vec<f64> = input.data().iter().map(|&x| sigmoid_scalar(x)).collect();
    let out = input.data().iter().zip(&sig).map(|(&x, &s)| x * s).collect();
    (Tensor::new(input.shape(), out).expect("silu shape"), sig)
}

pub fn silu_backward_cached(input: &Tensor, sigmoid: &[f64], grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(sigmoid)
        .zip(grad_out.data())
        .map(|((&x, &sg), &g)| g * (sg + x * sg * (1.0 - sg)))
        .collect();
    Tensor::new(input.shape(), data).expect("silu grad shape")
}

/// `output` is the forward result; silu needs the forward input instead.
pub fn activation_backward(
    input: &Tensor,
    output: &Tensor,
    kind: ActivationKind,
    grad_out: &Tensor,
) -> Tensor {
    let s = input.shape();
    let g = grad_out.data();
    let data: Vec<f64> = match kind {
        ActivationKind::Sigmoid => output
            .data()
            .iter()
            .zip(g)
            .map(|(&y, &g)| g * y * (1.0 - y))
            .collect(),
        ActivationKind::Silu => input
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &g)| {
                let sg = sigmoid_scalar(x);
                g * (sg + x * sg * (1.0 - sg))
            })
            .collect(),
        ActivationKind::SoftmaxOverChannels => {
            let y = output.data();
            let hw = s.hw();
            let mut dx = vec![0.0; s.numel()];
            for n in 0..s.n {
                let base = n * s.c * hw;
                for p in 0..hw {
                    let dot: f64 = (0..s.c)
                        .map(|c| g[base + c * hw + p] * y[base + c * hw + p])
                        .sum();
                    for c in 0..s.c {
                        let i = base + c * hw + p;
                        dx[i] = y[i] * (g[i] - dot);
                    }
                }
            }
            dx
        }
    };
    Tensor::new(s, data).expect("activation grad shape")
}

// --- normalization -----------------------------------------------------------

fn check_len(what: &str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(shape_err(format!(
            "{what} has {} entries, expected {expected}",
            v.len()
        )));
    }
    Ok(())
}

pub fn normalize(input: &Tensor, kind: NormKind<'_>) -> Result<Tensor> {
    match kind {
        NormKind::BatchNormInfer {
            mean,
            var,
            gamma,
            beta,
        } => batchnorm_infer(input, mean, var, gamma, beta),
        NormKind::GroupNorm {
            groups,
            gamma,
            beta,
        } => Ok(group_norm(input, groups, gamma, beta)?.output),
    }
}

pub fn batchnorm_infer(
    input: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> Result<Tensor> {
    let s = input.shape();
    for (name, v) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        check_len(name, v, s.c)?;
    }
    let mut out = input.clone();
    let hw = s.hw();
    for (i, chunk) in out.data_mut().chunks_exact_mut(hw).enumerate() {
        let c = i % s.c;
        let scale = gamma[c] / (var[c].max(0.0) + NORM_EPS).sqrt();
        let shift = beta[c] - mean[c] * scale;
        chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    Ok(out)
}

pub fn batchnorm_infer_backward(
    input: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    grad_out: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = input.shape();
    let hw = s.hw();
    let mut dx = grad_out.clone();
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    let x = input.data();
    for (i, chunk) in dx.data_mut().chunks_exact_mut(hw).enumerate() {
        let c = i % s.c;
        let inv = 1.0 / (var[c].max(0.0) + NORM_EPS).sqrt();
        let xs = &x[i * hw..(i + 1) * hw];
        for (d, &xv) in chunk.iter_mut().zip(xs) {
            dgamma[c] += *d * (xv - mean[c]) * inv;
            dbeta[c] += *d;
            *d *= gamma[c] * inv;
        }
    }
    (dx, dgamma, dbeta)
}

/// Forward result of a statistics-computing normalization, with what the
/// backward pass needs.
pub struct NormForward {
    pub output: Tensor,
    /// Normalized values before the affine transform.
    pub xhat: Tensor,
    /// One entry per statistics bucket.
    pub mean: Vec<f64>,
    /// Biased variance (divide by count).
    pub var: Vec<f64>,
}

/// Batch normalization using the statistics of the batch itself.
pub fn batchnorm_train(input: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<NormForward> {
    let s = input.shape();
    check_len("gamma", gamma, s.c)?;
    check_len("beta", beta, s.c)?;
    let hw = s.hw();
    let count = (s.n * hw) as f64;
    let x = input.data();
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for (i, chunk) in x.chunks_exact(hw).enumerate() {
        mean[i % s.c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, chunk) in x.chunks_exact(hw).enumerate() {
        let m = mean[i % s.c];
        var[i % s.c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    let mut xhat = input.clone();
    let mut out = input.clone();
    for (i, (xh, o)) in xhat
        .data_mut()
        .chunks_exact_mut(hw)
        .zip(out.data_mut().chunks_exact_mut(hw))
        .enumerate()
    {
        let c = i % s.c;
        let inv = 1.0 / (var[c] + NORM_EPS).sqrt();
        for (a, b) in xh.iter_mut().zip(o.iter_mut()) {
            *a = (*a - mean[c]) * inv;
            *b = gamma[c] * *a + beta[c];
        }
    }
    Ok(NormForward {
        output: out,
        xhat,
        mean,
        var,
    })
}

/// Shared backward of statistics-computing normalizations. `bucket(i)` maps a
/// (n, c) plane index to its statistics bucket; `count` is elements per bucket.
fn stats_norm_backward(
    fwd_xhat: &Tensor,
    var: &[f64],
    gamma: &[f64],
    grad_out: &Tensor,
    bucket: impl Fn(usize) -> usize,
    count: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = fwd_xhat.shape();
    let hw = s.hw();
    let xh = fwd_xhat.data();
    let g = grad_out.data();
    let nb = var.len();
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    let mut sum_d = vec![0.0; nb];
    let mut sum_dx = vec![0.0; nb];
    for i in 0..s.n * s.c {
        let c = i % s.c;
        let b = bucket(i);
        for p in i * hw..(i + 1) * hw {
            dgamma[c] += g[p] * xh[p];
            dbeta[c] += g[p];
            let d = g[p] * gamma[c];
            sum_d[b] += d;
            sum_dx[b] += d * xh[p];
        }
    }
    let mut dx = vec![0.0; s.numel()];
    for i in 0..s.n * s.c {
        let c = i % s.c;
        let b = bucket(i);
        let inv = 1.0 / (var[b] + NORM_EPS).sqrt();
        for p in i * hw..(i + 1) * hw {
            let d = g[p] * gamma[c];
            dx[p] = inv * (d - sum_d[b] / count - xh[p] * sum_dx[b] / count);
        }
    }
    (Tensor::new(s, dx).expect("norm grad shape"), dgamma, dbeta)
}

pub fn batchnorm_train_backward(
    fwd: &NormForward,
    gamma: &[f64],
    grad_out: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = fwd.xhat.shape();
    stats_norm_backward(&fwd.xhat, &fwd.var, gamma, grad_out, |i| i % s.c, (s.n * s.hw()) as f64)
}

pub fn group_norm(input: &Tensor, groups: usize, gamma: &[f64], beta: &[f64]) -> Result<NormForward> {
    let s = input.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(MasfError::Partition {
            channels: s.c,
            parts: groups,
        });
    }
    check_len("gamma", gamma, s.c)?;
    check_len("beta", beta, s.c)?;
    let per = s.c / groups * s.hw();
    let x = input.data();
    let nb = s.n * groups;
    let mut mean = vec![0.0; nb];
    let mut var = vec![0.0; nb];
    for (b, chunk) in x.chunks_exact(per).enumerate() {
        let m = chunk.iter().sum::<f64>() / per as f64;
        mean[b] = m;
        var[b] = chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / per as f64;
    }
    let mut xhat = input.clone();
    let mut out = input.clone();
    let hw = s.hw();
    for (i, (xh, o)) in xhat
        .data_mut()
        .chunks_exact_mut(hw)
        .zip(out.data_mut().chunks_exact_mut(hw))
        .enumerate()
    {
        let c = i % s.c;
        let b = i / (s.c / groups);
        let inv = 1.0 / (var[b] + NORM_EPS).sqrt();
        for (a, o) in xh.iter_mut().zip(o.iter_mut()) {
            *a = (*a - mean[b]) * inv;
            *o = gamma[c] * *a + beta[c];
        }
    }
    Ok(NormForward {
        output: out,
        xhat,
        mean,
        var,
    })
}

pub fn group_norm_backward(
    fwd: &NormForward,
    groups: usize,
    gamma: &[f64],
    grad_out: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = fwd.xhat.shape();
    let cpg = s.c / groups;
    stats_norm_backward(&fwd.xhat, &fwd.var, gamma, grad_out, |i| i / cpg, (cpg * s.hw()) as f64)
}

// --- channel concat / split --------------------------------------------------

pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| shape_err("concat of zero tensors"))?
        .shape();
    let mut c = 0;
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(shape_err(format!("cannot concat {s} with {first}")));
        }
        c += s.c;
    }
    let os = Shape::new(first.n, c, first.h, first.w);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..first.n {
        for t in inputs {
            let per = t.shape().c * first.hw();
            out.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::new(os, out)
}

/// Channels `start..start + len` of every sample.
pub fn slice_channels(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = input.shape();
    if len == 0 || start + len > s.c {
        return Err(shape_err(format!(
            "channel slice {start}..{} out of range for {s}",
            start + len
        )));
    }
    let hw = s.hw();
    let mut out = Vec::with_capacity(s.n * len * hw);
    for n in 0..s.n {
        let off = (n * s.c + start) * hw;
        out.extend_from_slice(&input.data()[off..off + len * hw]);
    }
    Tensor::new(Shape::new(s.n, len, s.h, s.w), out)
}

pub fn split_channels(input: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    let c = input.shape().c;
    if parts == 0 || c % parts != 0 {
        return Err(MasfError::Partition { channels: c, parts });
    }
    let len = c / parts;
    (0..parts)
        .map(|i| slice_channels(input, i * len, len))
        .collect()
}

// --- matmul ------------------------------------------------------------------

/// Treats (n, c) as the batch index and (h, w) as matrix rows/cols:
/// (B, M, K) · (B, K, N) → (B, M, N).
pub fn matmul_batched_shape(a: Shape, b: Shape) -> Result<Shape> {
    if a.n != b.n || a.c != b.c || a.w != b.h {
        return Err(shape_err(format!(
            "matmul operands {a} and {b} are incompatible"
        )));
    }
    Ok(Shape::new(a.n, a.c, a.h, b.w))
}

pub fn matmul_batched(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let os = matmul_batched_shape(sa, sb)?;
    let (m, k, n) = (sa.h, sa.w, sb.w);
    let mut out = vec![0.0; os.numel()];
    for bi in 0..sa.n * sa.c {
        gemm(
            m,
            k,
            n,
            &a.data()[bi * m * k..(bi + 1) * m * k],
            false,
            &b.data()[bi * k * n..(bi + 1) * k * n],
            false,
            &mut out[bi * m * n..(bi + 1) * m * n],
            false,
        );
    }
    Tensor::new(os, out)
}

pub fn matmul_batched_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let (sa, sb) = (a.shape(), b.shape());
    let (m, k, n) = (sa.h, sa.w, sb.w);
    let mut da = vec![0.0; sa.numel()];
    let mut db = vec![0.0; sb.numel()];
    let g = grad_out.data();
    for bi in 0..sa.n * sa.c {
        let gb = &g[bi * m * n..(bi + 1) * m * n];
        gemm(m, n, k, gb, false, &b.data()[bi * k * n..(bi + 1) * k * n], true, &mut da[bi * m * k..(bi + 1) * m * k], false);
        gemm(k, m, n, &a.data()[bi * m * k..(bi + 1) * m * k], true, gb, false, &mut db[bi * k * n..(bi + 1) * k * n], false);
    }
    (
        Tensor::new(sa, da).expect("matmul grad a"),
        Tensor::new(sb, db).expect("matmul grad b"),
    )
}

// --- elementwise -------------------------------------------------------------

fn broadcast_ok(a: Shape, b: Shape) -> bool {
    a.dims()
        .iter()
        .zip(b.dims().iter())
        .all(|(&x, &y)| x == y || y == 1)
}

/// Elementwise product where every axis of `b` either matches `a` or is 1.
pub fn mul_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if !broadcast_ok(sa, sb) {
        return Err(shape_err(format!("cannot broadcast {sb} onto {sa}")));
    }
    if sa == sb {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        return Tensor::new(sa, data);
    }
    let bd = b.data();
    let mut out = a.clone();
    let o = out.data_mut();
    let mut i = 0;
    for n in 0..sa.n {
        let bn = if sb.n == 1 { 0 } else { n };
        for c in 0..sa.c {
            let bc = if sb.c == 1 { 0 } else { c };
            for h in 0..sa.h {
                let bh = if sb.h == 1 { 0 } else { h };
                let row = sb.offset(bn, bc, bh, 0);
                if sb.w == 1 {
                    let v = bd[row];
                    o[i..i + sa.w].iter_mut().for_each(|x| *x *= v);
                } else {
                    o[i..i + sa.w]
                        .iter_mut()
                        .zip(&bd[row..row + sa.w])
                        .for_each(|(x, v)| *x *= v);
                }
                i += sa.w;
            }
        }
    }
    Ok(out)
}

pub fn mul_broadcast_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let (sa, sb) = (a.shape(), b.shape());
    let da = mul_broadcast(grad_out, b).expect("broadcast checked in forward");
    let mut db = vec![0.0; sb.numel()];
    let g = grad_out.data();
    let x = a.data();
    let mut i = 0;
    for n in 0..sa.n {
        let bn = if sb.n == 1 { 0 } else { n };
        for c in 0..sa.c {
            let bc = if sb.c == 1 { 0 } else { c };
            for h in 0..sa.h {
                let bh = if sb.h == 1 { 0 } else { h };
                for w in 0..sa.w {
                    let bw = if sb.w == 1 { 0 } else { w };
                    db[sb.offset(bn, bc, bh, bw)] += g[i] * x[i];
                    i += 1;
                }
            }
        }
    }
    (da, Tensor::new(sb, db).expect("broadcast grad shape"))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "cannot add {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)
}
