use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function with central finite
/// differences and returns the largest relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check(f, xs, step, false)
}

/// Like [`grad_check_many`] but the numeric derivative is the Richardson
/// combination `(4 D(step/2) - D(step)) / 3` of two central differences,
/// which cancels the `step^2` error term. Suits functions whose true partials
/// span many orders of magnitude, where a single step is either too coarse
/// for the large ones or too noisy for the small ones.
pub fn grad_check_extrapolated<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check(f, xs, step, true)
}

fn check<F>(f: F, xs: &[Tensor], step: f64, extrapolate: bool) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step {step}")));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar-valued function, got shape {:?}",
                out.shape()
            )));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (p, x) in xs.iter().enumerate() {
        for i in 0..x.len() {
            let original = x.data()[i];
            let mut central = |h: f64| -> Result<f64> {
                probe[p].data_mut()[i] = original + h;
                let plus = eval(&probe)?;
                probe[p].data_mut()[i] = original - h;
                let minus = eval(&probe)?;
                probe[p].data_mut()[i] = original;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = if extrapolate {
                (4.0 * central(step / 2.0)? - central(step)?) / 3.0
            } else {
                central(step)?
            };
            let a = analytic[p].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
