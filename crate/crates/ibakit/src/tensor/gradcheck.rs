//! Central finite-difference check of tape gradients.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Runs `f` through the tape at `point`, then compares the tape gradient
/// against central finite differences with the given step. Returns the
/// maximum relative error over coordinates.
///
/// `f` must map a tensor to a scalar tensor on the given tape.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if step <= 0.0 {
        return Err(Error::Contract("grad_check step must be positive".into()));
    }
    let base = point.to_vec();
    let shape = point.shape();

    let tape = Tape::new();
    let x = Tensor::new(shape.clone(), base.clone())?.with_grad();
    let out = f(&tape, &x)?;
    if out.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got shape {:?}",
            out.shape()
        )));
    }
    tape.backward(&out)?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tape::new();
        let x = Tensor::new(shape.clone(), data)?;
        f(&t, &x)?.item()
    };

    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}
