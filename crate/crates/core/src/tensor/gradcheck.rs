use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compare tape gradients of a scalar function against central differences.
///
/// `f` rebuilds the computation on a fresh tape from the supplied leaves.
/// Runs in `f64`; `step` is the central-difference half-width. When
/// `max_coords` is set, each input is probed at that many evenly strided
/// coordinates instead of all of them.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<_> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if out.value().numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar-valued function, got shape {:?}",
                out.shape()
            )));
        }
        Ok(out.value().data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if out.value().numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    let grads = tape.backward(&out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        coords_checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var);
        let n = inputs[which].numel();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = inputs[which].data()[idx];
            probe[which].data_mut()[idx] = orig + step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[idx] = orig - step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic.data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_input = which;
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
