//! Relative L2 and the gradient-difference regularizer.

use crate::autodiff::{Tape, Var};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Per-sample `‖pred_i − truth_i‖₂ / max(‖truth_i‖₂, ε)` over all non-batch axes.
pub fn rel_l2_per_sample(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<Vec<f64>, TensorError> {
    if pred.shape() != truth.shape() || pred.rank() == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "rel_l2",
            left: pred.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    let b = pred.shape()[0];
    let per = pred.len() / b.max(1);
    Ok((0..b)
        .map(|i| {
            let r = i * per..(i + 1) * per;
            let (mut d, mut t) = (0.0, 0.0);
            for (p, q) in pred.data()[r.clone()].iter().zip(&truth.data()[r]) {
                d += (p - q) * (p - q);
                t += q * q;
            }
            d.sqrt() / t.sqrt().max(crate::autodiff::REL_L2_EPS)
        })
        .collect())
}

/// Batch mean of [`rel_l2_per_sample`].
pub fn rel_l2(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64, TensorError> {
    let v = rel_l2_per_sample(pred, truth)?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

/// Relative L2 between the stacked grid gradients of `pred` and of `truth`.
/// Gradients use unit spacing: central differences inside, one-sided at
/// the edges.
pub fn gdl_on_tape<T: Scalar>(tape: &mut Tape<T>, pred: Var, truth: &Tensor<T>, grid: (usize, usize)) -> Result<Var, TensorError> {
    let t = tape.constant(truth.clone());
    let gt = tape.grid_gradient(t, grid.0, grid.1)?;
    let gt = tape.value(gt).clone();
    let gp = tape.grid_gradient(pred, grid.0, grid.1)?;
    tape.rel_l2(gp, &gt)
}

pub fn gdl_loss(pred: &Tensor<f64>, truth: &Tensor<f64>, grid: (usize, usize)) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = gdl_on_tape(&mut tape, p, truth, grid)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn rel_l2_examples() {
        let u = Tensor::randn(&[3, 10, 2], &mut Rng::new(0, 0));
        assert_eq!(rel_l2(&u, &u).unwrap(), 0.0);
        assert!((rel_l2(&Tensor::zeros(&[3, 10, 2]), &u).unwrap() - 1.0).abs() < 1e-15);
        assert!((rel_l2(&u.scale(2.0), &u).unwrap() - 1.0).abs() < 1e-15);
        assert!(rel_l2(&u, &Tensor::zeros(&[3, 10, 1])).is_err());
    }

    #[test]
    fn gdl_examples() {
        let (h, w) = (6, 5);
        let u = Tensor::randn(&[2, h * w, 1], &mut Rng::new(1, 0));
        assert_eq!(gdl_loss(&u, &u, (h, w)).unwrap(), 0.0);
        let shifted = u.map(|v| v + 3.0);
        assert!(gdl_loss(&shifted, &u, (h, w)).unwrap() < 1e-14);

        // A ramp along columns adds the same constant to every ∂/∂col entry.
        let alpha = 0.25;
        let mut ramp = u.clone();
        for (i, v) in ramp.data_mut().iter_mut().enumerate() {
            *v += alpha * ((i % (h * w)) % w) as f64;
        }
        let got = gdl_loss(&ramp, &u, (h, w)).unwrap();
        let mut tape = Tape::new();
        let t = tape.constant(u.clone());
        let g = tape.grid_gradient(t, h, w).unwrap();
        let g = tape.value(g).clone();
        let per = 2 * h * w;
        let ramp_norm = (alpha * alpha * (h * w) as f64).sqrt();
        let want = g
            .data()
            .chunks(per)
            .map(|gi| ramp_norm / gi.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / 2.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(gdl_loss(&u, &u, (1, h * w)).is_err());
    }
}
