//! Architectural units with owned parameters.

mod check;
mod dasi;
mod iema;
mod mfam;
mod params;

pub use dasi::{dasi_gate, gate as dasi_gate_on_tape, AlignMode, Dasi, DasiInput, DasiOutput, DasiSpec, DASI_PARTITIONS};
pub use check::ModuleCheck;
pub use iema::{Iema, IemaSpec, MIN_GROUP_CHANNELS};
pub use mfam::{Mfam, MfamSpec};
pub use params::{apply_stat_updates, Ctx, Mode, ParamEntry, ParamId, ParamKind, ParamStore, StatUpdate};

use crate::error::Result;
use crate::tensor::{ConvSpec, Shape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.03;

/// Convolution with an optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let weight = store.add_kaiming(format!("{name}.weight"), spec.weight_shape())?;
        let bias = if spec.has_bias {
            Some(store.add(
                format!("{name}.bias"),
                Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1)),
                ParamKind::Learnable,
            )?)
        } else {
            None
        };
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, &self.spec)
    }
}

/// Batch normalization with learnable affine parameters and running stats.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let s = Shape::new(1, channels, 1, 1);
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(s, 1.0), ParamKind::Learnable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(s), ParamKind::Learnable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(s), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full(s, 1.0), ParamKind::Buffer)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match ctx.mode() {
            Mode::Train => {
                let (y, mean, var) = ctx.tape.batchnorm_train(x, g, b)?;
                ctx.push_stat_update(StatUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    batch_mean: mean,
                    batch_var: var,
                    momentum: BN_MOMENTUM,
                });
                Ok(y)
            }
            Mode::Infer => {
                let store = ctx.store();
                let mean = store.get(self.running_mean).data();
                let var = store.get(self.running_var).data();
                ctx.tape.batchnorm_infer(x, g, b, mean, var)
            }
        }
    }
}

/// Convolution (no bias) → batch norm → SiLU.
#[derive(Debug, Clone)]
pub struct ConvBnSilu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnSilu {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        let spec = spec.with_bias(false);
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), spec)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), spec.out_channels)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.tape.silu(y))
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }
}
