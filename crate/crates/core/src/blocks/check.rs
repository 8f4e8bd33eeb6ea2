//! Central-difference checks over a parameterised module: inputs *and*
//! learnable parameters are perturbed.

use super::{Ctx, Mode, ParamId, ParamStore};
use crate::error::{MasfError, Result};
use crate::rng::SplitMix64;
use crate::tensor::{GradCheckReport, Tape, Tensor, Var};

pub struct ModuleCheck {
    pub epsilon: f64,
    /// Coordinates sampled per tensor (inputs and each parameter).
    pub per_tensor: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Relative error is `|a − n| / max(floor, |n|)`.
    pub floor: f64,
}

impl Default for ModuleCheck {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            per_tensor: 6,
            seed: 0,
            mode: Mode::Train,
            floor: 1.0,
        }
    }
}

enum Target {
    Input(usize),
    Param(ParamId),
}

impl ModuleCheck {
    /// `f` maps input leaves to one or more outputs; the checked scalar is a
    /// fixed random projection of every output.
    pub fn run<F>(&self, store: &ParamStore, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Vec<Var>>,
    {
        let mut ctx = Ctx::new(store, Tape::new(), self.mode);
        let in_vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.leaf(t.clone(), true)).collect();
        let outs = f(&mut ctx, &in_vars)?;
        let mut rng = SplitMix64::new(self.seed ^ 0x5EED);
        let projections: Vec<Tensor> = outs
            .iter()
            .map(|&o| Tensor::from_fn(ctx.tape.shape(o), |_, _, _, _| rng.uniform(-1.0, 1.0)))
            .collect();
        let seeds = outs.iter().copied().zip(projections.iter().cloned()).collect();
        let grads = ctx.tape.backward(seeds)?;
        let param_grads = ctx.param_grads(&grads);

        let loss = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
            let mut ctx = Ctx::new(store, Tape::no_grad(), self.mode);
            let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.constant(t.clone())).collect();
            let outs = f(&mut ctx, &vars)?;
            Ok(outs
                .iter()
                .zip(&projections)
                .map(|(&o, p)| {
                    ctx.tape
                        .value(o)
                        .data()
                        .iter()
                        .zip(p.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .sum())
        };

        let mut pick = SplitMix64::new(self.seed);
        let mut sample = |n: usize| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..n).collect();
            pick.shuffle(&mut idx);
            idx.truncate(self.per_tensor);
            idx
        };
        let mut targets: Vec<(Target, Tensor, Vec<usize>)> = Vec::new();
        for (i, v) in in_vars.iter().enumerate() {
            let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            let idx = sample(g.numel());
            targets.push((Target::Input(i), g, idx));
        }
        for (id, g) in param_grads {
            let idx = sample(g.numel());
            targets.push((Target::Param(id), g, idx));
        }

        let mut store_work = store.clone();
        let mut inputs_work = inputs.to_vec();
        let mut report = GradCheckReport {
            max_relative_error: 0.0,
            worst: (0, 0),
            checked: 0,
        };
        for (ti, (target, analytic, idx)) in targets.iter().enumerate() {
            for &j in idx {
                let mut eval_at = |delta: f64| -> Result<f64> {
                    let slot = match target {
                        Target::Input(i) => &mut inputs_work[*i].data_mut()[j],
                        Target::Param(id) => &mut store_work.get_mut(*id).data_mut()[j],
                    };
                    let orig = *slot;
                    *slot = orig + delta;
                    let v = loss(&store_work, &inputs_work);
                    let slot = match target {
                        Target::Input(i) => &mut inputs_work[*i].data_mut()[j],
                        Target::Param(id) => &mut store_work.get_mut(*id).data_mut()[j],
                    };
                    *slot = orig;
                    v
                };
                let numeric = (eval_at(self.epsilon)? - eval_at(-self.epsilon)?) / (2.0 * self.epsilon);
                let a = analytic.data()[j];
                if !a.is_finite() || !numeric.is_finite() {
                    let what = match target {
                        Target::Input(i) => format!("input {i}"),
                        Target::Param(id) => format!("parameter `{}`", store.entry(*id).name),
                    };
                    return Err(MasfError::Numerical(format!(
                        "non-finite gradient at {what}, element {j}"
                    )));
                }
                let err = (a - numeric).abs() / numeric.abs().max(self.floor);
                if err > report.max_relative_error {
                    report.max_relative_error = err;
                    report.worst = (ti, j);
                }
                report.checked += 1;
            }
        }
        Ok(report)
    }
}
