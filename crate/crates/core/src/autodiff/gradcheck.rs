use crate::tensor::{Tensor, TensorError};

use super::{Tape, Var};

fn evaluate<F>(f: &F, xs: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(TensorError::NonScalarRoot(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite(v));
    }
    Ok(v)
}

/// Compares tape gradients of a scalar `f` against central differences for
/// every coordinate of every input. Returns the max relative error per input.
///
/// The reference derivative is the fourth-order central difference
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
///
/// `step` is rounded to the nearest power of two so `x ± step` carries no
/// representation error for moderate `x`.
pub fn grad_check_fn<F>(f: F, xs: &[Tensor<f64>], step: f64) -> Result<Vec<f64>, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if !(step > 0.0) {
        return Err(TensorError::contract("grad_check", "step must be positive"));
    }
    let step = step.log2().round().exp2();
    evaluate(&f, xs)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;

    let mut errors = Vec::with_capacity(xs.len());
    let mut probe = xs.to_vec();
    for (slot, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).unwrap_or_else(|| Tensor::zeros(xs[slot].shape()));
        let mut worst = 0.0f64;
        for i in 0..xs[slot].len() {
            let x0 = xs[slot].data()[i];
            let mut at = |dx: f64| {
                probe[slot].data_mut()[i] = x0 + dx;
                let v = evaluate(&f, &probe);
                probe[slot].data_mut()[i] = x0;
                v
            };
            let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            let cd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let a = analytic.data()[i];
            let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            worst = worst.max(err);
        }
        errors.push(worst);
    }
    Ok(errors)
}

/// Single-input form of [`grad_check_fn`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let errs = grad_check_fn(|t, v| f(t, v[0]), std::slice::from_ref(x), step)?;
    Ok(errs[0])
}
