//! Central finite-difference verification of analytic gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Builds `f` on a fresh tape with `inputs` as differentiable leaves and
/// returns the largest `|analytic - numeric| / max(|numeric|, 1e-8)` over
/// every input element.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |f: &mut F, xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[k].numel()],
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&mut f, &xs)?;
            xs[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&mut f, &xs)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = (a - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    tape.value(v).item().ok_or_else(|| {
        Error::invalid(format!(
            "gradient check needs a scalar output, got shape {:?}",
            tape.shape(v)
        ))
    })
}
