//! Grouped attention with directional pooling, a multi-branch local pathway
//! and cross-spatial interaction between the two.
//!
//! Channels are split into `groups` groups that are folded into the batch
//! axis, so every group shares the same (small) parameter set:
//!
//! ```text
//! g        = reshape(x, N·G, C/G, H, W)
//! a_h, a_w = pw(avg over W), pw(avg over H)         one shared 1×1 conv
//! x1       = groupnorm(g ⊙ σ(a_h) ⊙ σ(a_w))         per-channel statistics
//! x2       = dw3×3(g) + dw1×b(g) + dwb×1(g) + g     b = band kernel
//! w        = softmax(gap(x1))ᵀ·flat(x2) + softmax(gap(x2))ᵀ·flat(x1)
//! out      = reshape(g ⊙ σ(w), N, C, H, W)
//! ```
//!
//! Applying the 1×1 conv to the row and column descriptors separately is the
//! same as concatenating them, convolving once and splitting back.

use serde::{Deserialize, Serialize};

use super::{Conv, Ctx, ParamId, ParamKind, ParamStore};
use crate::error::{config_err, Result};
use crate::tensor::{ConvSpec, PoolKind, Shape, Tensor, Var};

/// Smallest group width for which the channel softmax is non-degenerate.
pub const MIN_GROUP_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IemaSpec {
    pub channels: usize,
    pub groups: usize,
    pub band_kernel: usize,
}

impl IemaSpec {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            groups: 8,
            band_kernel: 11,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn group_channels(&self) -> usize {
        self.channels / self.groups
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(config_err(format!(
                "IEMA channels {} not divisible by groups {}",
                self.channels, self.groups
            )));
        }
        if self.group_channels() < MIN_GROUP_CHANNELS {
            return Err(config_err(format!(
                "IEMA needs >= {MIN_GROUP_CHANNELS} channels per group, got {} ({} channels / {} groups)",
                self.group_channels(),
                self.channels,
                self.groups
            )));
        }
        if self.band_kernel % 2 == 0 {
            return Err(config_err(format!(
                "IEMA band kernel must be odd, got {}",
                self.band_kernel
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Iema {
    pub spec: IemaSpec,
    pub directional: Conv,
    pub gn_gamma: ParamId,
    pub gn_beta: ParamId,
    pub square: Conv,
    pub row_band: Conv,
    pub col_band: Conv,
}

impl Iema {
    pub fn new(store: &mut ParamStore, name: &str, spec: IemaSpec) -> Result<Self> {
        spec.validate()?;
        let cg = spec.group_channels();
        let b = spec.band_kernel;
        let s = Shape::new(1, cg, 1, 1);
        Ok(Self {
            spec,
            directional: Conv::new(store, &format!("{name}.dir"), ConvSpec::new(cg, cg, 1, 1).with_bias(true))?,
            gn_gamma: store.add(format!("{name}.gn.gamma"), Tensor::full(s, 1.0), ParamKind::Learnable)?,
            gn_beta: store.add(format!("{name}.gn.beta"), Tensor::zeros(s), ParamKind::Learnable)?,
            square: Conv::new(store, &format!("{name}.dw3"), ConvSpec::depthwise(cg, 3, 3))?,
            row_band: Conv::new(store, &format!("{name}.dw1x{b}"), ConvSpec::depthwise(cg, 1, b))?,
            col_band: Conv::new(store, &format!("{name}.dw{b}x1"), ConvSpec::depthwise(cg, b, 1))?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, x)?.0)
    }

    /// Forward pass that also returns the three sigmoid attention maps
    /// (row gate, column gate, cross-spatial gate).
    pub fn forward_traced(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<(Var, [Var; 3])> {
        let s = ctx.tape.shape(x);
        if s.c != self.spec.channels {
            return Err(config_err(format!(
                "IEMA built for {} channels, input is {s}",
                self.spec.channels
            )));
        }
        let groups = self.spec.groups;
        let cg = self.spec.group_channels();
        let bg = s.n * groups;
        let t = &mut ctx.tape;
        let g = t.reshape(x, Shape::new(bg, cg, s.h, s.w))?;

        // Directional branch.
        let row_desc = t.pool(g, PoolKind::AvgAlongW)?;
        let col_desc = t.pool(g, PoolKind::AvgAlongH)?;
        let row_att = self.directional.forward(ctx, row_desc)?;
        let col_att = self.directional.forward(ctx, col_desc)?;
        let t = &mut ctx.tape;
        let row_gate = t.sigmoid(row_att);
        let col_gate = t.sigmoid(col_att);
        let x1 = t.mul(g, row_gate)?;
        let x1 = t.mul(x1, col_gate)?;
        let gamma = ctx.param(self.gn_gamma);
        let beta = ctx.param(self.gn_beta);
        let x1 = ctx.tape.group_norm(x1, gamma, beta, cg)?;

        // Local multi-branch pathway with identity.
        let sq = self.square.forward(ctx, g)?;
        let rb = self.row_band.forward(ctx, g)?;
        let cb = self.col_band.forward(ctx, g)?;
        let t = &mut ctx.tape;
        let x2 = t.add(sq, rb)?;
        let x2 = t.add(x2, cb)?;
        let x2 = t.add(x2, g)?;

        // Cross-spatial interaction.
        let d1 = descriptor(t, x1, bg, cg)?;
        let d2 = descriptor(t, x2, bg, cg)?;
        let flat = Shape::new(bg, 1, cg, s.h * s.w);
        let m1 = t.reshape(x1, flat)?;
        let m2 = t.reshape(x2, flat)?;
        let w12 = t.matmul(d1, m2)?;
        let w21 = t.matmul(d2, m1)?;
        let w = t.add(w12, w21)?;
        let w = t.reshape(w, Shape::new(bg, 1, s.h, s.w))?;
        let gate = t.sigmoid(w);
        let out = t.mul(g, gate)?;
        Ok((t.reshape(out, s)?, [row_gate, col_gate, gate]))
    }
}

/// softmax over channels of the globally pooled map, laid out as a 1×C row.
fn descriptor(t: &mut crate::tensor::Tape, x: Var, bg: usize, cg: usize) -> Result<Var> {
    let p = t.pool(x, PoolKind::GlobalAvg)?;
    let p = t.softmax_channels(p);
    t.reshape(p, Shape::new(bg, 1, 1, cg))
}
