//! Central finite-difference gradient checking in 64-bit.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Largest absolute numeric gradient seen, useful to confirm the check is not vacuous.
    pub max_abs_numeric: f64,
    pub checked: usize,
}

/// Checks `d loss / d inputs` for a scalar function of several tensors.
///
/// `entries` limits the number of elements probed per input (taken evenly
/// spaced); `None` probes all of them.
pub fn check<Fn>(
    inputs: &[Tensor<f64>],
    h: f64,
    floor: f64,
    entries: Option<usize>,
    f: Fn,
) -> Result<GradCheck>
where
    Fn: for<'t> std::ops::Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let step = entries.map_or(1, |m| (n / m.max(1)).max(1));
        for i in (0..n).step_by(step) {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            out.max_rel_err = out.max_rel_err.max(rel);
            out.max_abs_numeric = out.max_abs_numeric.max(numeric.abs());
            out.checked += 1;
        }
    }
    Ok(out)
}
