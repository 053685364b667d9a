use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compares reverse-mode gradients against central differences.
///
/// Returns `max_i |analytic_i − cd_i| / max(|analytic_i|, |cd_i|, 1e-8)` where
/// `cd_i = (f(x + h·e_i) − f(x − h·e_i)) / 2h`. `f` must be scalar-valued and
/// deterministic across calls.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tape<T>, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.param(x);
    let out = f(&tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(xv, x.numel());

    let eval = |values: Vec<T>| -> Result<f64> {
        let tape = Tape::new();
        let probe = Tensor::new(x.shape().to_vec(), values)?;
        let v = tape.constant(probe);
        let out = f(&tape, v)?;
        if tape.node(out).value.len() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(out)));
        }
        Ok(tape.scalar(out).as_f64())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.values().to_vec();
        let mut minus = x.values().to_vec();
        plus[i] = T::lit(plus[i].as_f64() + h);
        minus[i] = T::lit(minus[i].as_f64() - h);
        let cd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i].as_f64();
        let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
