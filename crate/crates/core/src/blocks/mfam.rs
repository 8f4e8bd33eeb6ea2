//! Multi-scale feature aggregation: parallel depthwise kernels of several
//! sizes plus an identity branch, summed, fused by a pointwise convolution and
//! added back onto the block input.
//!
//! ```text
//! h   = silu(pw_pre(x))
//! s   = h + Σ_k dw_k(h)          (identity term only if enabled)
//! out = x + silu(pw_fuse(s))
//! ```
//!
//! With every weight and bias zero the block is exactly the identity.

use serde::{Deserialize, Serialize};

use super::{Conv, Ctx, ParamStore};
use crate::error::{config_err, Result};
use crate::tensor::{ConvSpec, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfamSpec {
    pub channels: usize,
    pub kernel_sizes: Vec<usize>,
    pub include_identity_branch: bool,
}

impl MfamSpec {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            kernel_sizes: vec![3, 5, 7],
            include_identity_branch: true,
        }
    }

    pub fn branch_count(&self) -> usize {
        self.kernel_sizes.len() + usize::from(self.include_identity_branch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(config_err("MFAM needs at least one channel"));
        }
        if self.kernel_sizes.is_empty() && !self.include_identity_branch {
            return Err(config_err("MFAM needs at least one branch"));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(config_err(format!("MFAM kernel sizes must be odd, got {k}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Mfam {
    pub spec: MfamSpec,
    pub pre: Conv,
    pub branches: Vec<Conv>,
    pub fuse: Conv,
}

impl Mfam {
    pub fn new(store: &mut ParamStore, name: &str, spec: MfamSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let pre = Conv::new(store, &format!("{name}.pre"), ConvSpec::new(c, c, 1, 1).with_bias(true))?;
        let branches = spec
            .kernel_sizes
            .iter()
            .map(|&k| Conv::new(store, &format!("{name}.dw{k}"), ConvSpec::depthwise(c, k, k)))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv::new(store, &format!("{name}.fuse"), ConvSpec::new(c, c, 1, 1).with_bias(true))?;
        Ok(Self {
            spec,
            pre,
            branches,
            fuse,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.pre.forward(ctx, x)?;
        let h = ctx.tape.silu(h);
        let mut acc = self.spec.include_identity_branch.then_some(h);
        for b in &self.branches {
            let y = b.forward(ctx, h)?;
            acc = Some(match acc {
                Some(a) => ctx.tape.add(a, y)?,
                None => y,
            });
        }
        let s = acc.expect("validated: at least one branch");
        let f = self.fuse.forward(ctx, s)?;
        let f = ctx.tape.silu(f);
        ctx.tape.add(x, f)
    }
}
