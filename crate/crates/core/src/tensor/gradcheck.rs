//! Central-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{MasfError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |numeric|) over checked coordinates.
    pub max_relative_error: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Checks every coordinate of every input.
///
/// `f` builds a scalar (1×1×1×1) loss from leaves holding `inputs`.
pub fn grad_check<F>(inputs: &[Tensor], epsilon: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_coords(inputs, epsilon, &all, &f)
}

/// Checks at most `per_input` randomly chosen coordinates of each input.
pub fn grad_check_sampled<F>(
    inputs: &[Tensor],
    epsilon: f64,
    per_input: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = SplitMix64::new(seed);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let mut idx: Vec<usize> = (0..t.numel()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(per_input);
            idx.sort_unstable();
            idx
        })
        .collect();
    check_coords(inputs, epsilon, &coords, &f)
}

fn eval_loss<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

fn check_coords<F>(inputs: &[Tensor], epsilon: f64, coords: &[Vec<usize>], f: &F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(MasfError::Shape(format!(
            "grad_check needs a scalar loss, got {}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(vec![(out, Tensor::scalar(1.0))])?;
    drop(tape);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, idxs) in coords.iter().enumerate() {
        let analytic = grads.get(vars[ii]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[ii].shape()));
        for &j in idxs {
            let orig = inputs[ii].data()[j];
            work[ii].data_mut()[j] = orig + epsilon;
            let plus = eval_loss(&work, f)?;
            work[ii].data_mut()[j] = orig - epsilon;
            let minus = eval_loss(&work, f)?;
            work[ii].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[j];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(MasfError::Numerical(format!(
                    "non-finite gradient at input {ii}, element {j} (analytic {a}, numeric {numeric})"
                )));
            }
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (ii, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
