//! Dimension-aware selective integration.
//!
//! The finer ("low-dimensional") and coarser ("high-dimensional") neighbours
//! are first aligned to the current level: a 1×1 projection to the current
//! channel count, then stride-2 Conv–BN–SiLU steps for the finer input or
//! nearest upsampling for the coarser one. All three tensors are split into
//! four channel partitions and, per partition,
//!
//! ```text
//! α = σ(current_i)
//! fused_i = α ⊙ low_i + (1 − α) ⊙ high_i
//! ```
//!
//! The partitions are concatenated, passed through a 1×1 conv and batch norm,
//! and the current features are added back.
//!
//! A missing neighbour (the finest or coarsest pyramid level) is replaced by
//! the current features themselves.

use serde::{Deserialize, Serialize};

use super::{BatchNorm, Conv, ConvBnSilu, Ctx, ParamStore};
use crate::error::{config_err, Result};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

pub const DASI_PARTITIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignMode {
    /// Channel projection first, spatial resampling second.
    ConvThenInterp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DasiSpec {
    pub channels: usize,
    pub partitions: usize,
    pub align_mode: AlignMode,
}

impl DasiSpec {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            partitions: DASI_PARTITIONS,
            align_mode: AlignMode::ConvThenInterp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.partitions != DASI_PARTITIONS {
            return Err(config_err(format!(
                "DASI uses exactly {DASI_PARTITIONS} partitions, got {}",
                self.partitions
            )));
        }
        if self.channels == 0 || self.channels % DASI_PARTITIONS != 0 {
            return Err(config_err(format!(
                "DASI channels must be a positive multiple of {DASI_PARTITIONS}, got {}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Geometry of a neighbour input relative to the current level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DasiInput {
    pub channels: usize,
    /// Spatial size ratio between the two levels (≥ 1, power of two).
    pub ratio: usize,
}

#[derive(Debug, Clone)]
enum Resample {
    Down(Vec<ConvBnSilu>),
    Up(usize),
}

#[derive(Debug, Clone)]
struct Align {
    proj: Conv,
    resample: Resample,
}

impl Align {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let mut y = self.proj.forward(ctx, x)?;
        match &self.resample {
            Resample::Down(steps) => {
                for s in steps {
                    y = s.forward(ctx, y)?;
                }
            }
            Resample::Up(scale) => y = ctx.tape.resize_nearest(y, *scale)?,
        }
        Ok(y)
    }
}

fn log2_exact(ratio: usize) -> Result<usize> {
    if ratio == 0 || !ratio.is_power_of_two() {
        return Err(config_err(format!(
            "DASI cannot align inputs with spatial ratio {ratio} (not a power of two)"
        )));
    }
    Ok(ratio.trailing_zeros() as usize)
}

#[derive(Debug, Clone)]
pub struct Dasi {
    pub spec: DasiSpec,
    low: Option<Align>,
    high: Option<Align>,
    pub tail: Conv,
    pub tail_bn: BatchNorm,
}

pub struct DasiOutput {
    /// Concatenated gated partitions, before the 1×1 conv.
    pub fused: Var,
    pub output: Var,
}

impl Dasi {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: DasiSpec,
        low: Option<DasiInput>,
        high: Option<DasiInput>,
    ) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let low = low
            .map(|l| -> Result<Align> {
                let steps = log2_exact(l.ratio)?;
                Ok(Align {
                    proj: Conv::new(store, &format!("{name}.low.proj"), ConvSpec::new(l.channels, c, 1, 1).with_bias(true))?,
                    resample: Resample::Down(
                        (0..steps)
                            .map(|i| ConvBnSilu::new(store, &format!("{name}.low.down{i}"), ConvSpec::new(c, c, 3, 2)))
                            .collect::<Result<_>>()?,
                    ),
                })
            })
            .transpose()?;
        let high = high
            .map(|h| -> Result<Align> {
                log2_exact(h.ratio)?;
                Ok(Align {
                    proj: Conv::new(store, &format!("{name}.high.proj"), ConvSpec::new(h.channels, c, 1, 1).with_bias(true))?,
                    resample: Resample::Up(h.ratio),
                })
            })
            .transpose()?;
        Ok(Self {
            spec,
            low,
            high,
            tail: Conv::new(store, &format!("{name}.tail"), ConvSpec::new(c, c, 1, 1))?,
            tail_bn: BatchNorm::new(store, &format!("{name}.tail_bn"), c)?,
        })
    }

    /// `low`/`high` must be given exactly when the block was built with the
    /// corresponding neighbour.
    pub fn forward(&self, ctx: &mut Ctx<'_>, current: Var, low: Option<Var>, high: Option<Var>) -> Result<DasiOutput> {
        let low = match (&self.low, low) {
            (Some(a), Some(v)) => a.forward(ctx, v)?,
            (None, None) => current,
            _ => return Err(config_err("DASI low-level input does not match how the block was built")),
        };
        let high = match (&self.high, high) {
            (Some(a), Some(v)) => a.forward(ctx, v)?,
            (None, None) => current,
            _ => return Err(config_err("DASI high-level input does not match how the block was built")),
        };
        let fused = gate(&mut ctx.tape, current, low, high)?;
        let y = self.tail.forward(ctx, fused)?;
        let y = self.tail_bn.forward(ctx, y)?;
        let output = ctx.tape.add(y, current)?;
        Ok(DasiOutput { fused, output })
    }
}

/// Partitioned sigmoid gate on aligned inputs, recorded on the tape.
pub fn gate(t: &mut Tape, current: Var, low: Var, high: Var) -> Result<Var> {
    let (sc, sl, sh) = (t.shape(current), t.shape(low), t.shape(high));
    if sc != sl || sc != sh {
        return Err(config_err(format!(
            "DASI inputs not aligned: current {sc}, low {sl}, high {sh}"
        )));
    }
    let cur = t.split_channels(current, DASI_PARTITIONS)?;
    let lows = t.split_channels(low, DASI_PARTITIONS)?;
    let highs = t.split_channels(high, DASI_PARTITIONS)?;
    let mut parts = Vec::with_capacity(DASI_PARTITIONS);
    for i in 0..DASI_PARTITIONS {
        let alpha = t.sigmoid(cur[i]);
        // α·low + (1 − α)·high = high + α·(low − high)
        let diff = t.sub(lows[i], highs[i])?;
        let weighted = t.mul(alpha, diff)?;
        parts.push(t.add(highs[i], weighted)?);
    }
    t.concat(&parts)
}

/// Tensor-level form of the partitioned gate (no parameters).
pub fn dasi_gate(current: &Tensor, low: &Tensor, high: &Tensor) -> Result<Tensor> {
    let mut t = Tape::no_grad();
    let c = t.constant(current.clone());
    let l = t.constant(low.clone());
    let h = t.constant(high.clone());
    let out = gate(&mut t, c, l, h)?;
    Ok(t.value(out).clone())
}
