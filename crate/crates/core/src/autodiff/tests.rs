use super::*;
use crate::tensor::Rng;

#[test]
fn every_op_passes_grad_check() {
    let mut rng = Rng::new(2024, 0);
    for kind in OpKind::DIFFERENTIABLE {
        for trial in 0..10 {
            let (inputs, f) = random_case(kind, &mut rng);
            let errs = grad_check_fn(&f, &inputs, 1e-5).unwrap();
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
            let root = f(&mut tape, &vars).unwrap();
            let kinds: Vec<OpKind> = (0..tape.len()).map(|i| tape.kind(Var(i))).collect();
            assert!(kinds.contains(&kind), "case for {} does not record it", kind.name());
            for (slot, e) in errs.iter().enumerate() {
                assert!(*e < 1e-4, "{} trial {trial} input {slot}: rel err {e:e}", kind.name());
            }
            tape.backward(root).unwrap();
        }
    }
}

#[test]
fn sum_and_square_gradients() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0; 6]);

    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_contract() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(Tensor::ones(&[3]));
    let y = t.silu(x);
    assert!(matches!(t.backward(y), Err(TensorError::NonScalarRoot(_))));
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(TensorError::BackwardTwice)));
    let g1 = t.grad(x).unwrap();
    t.zero_grad();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), g1);
}

#[test]
fn constants_receive_no_gradient() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(Tensor::ones(&[2]));
    let c = t.constant(Tensor::full(&[2], 3.0));
    let y = t.mul(x, c).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[3.0, 3.0]);
    assert!(t.grad(c).is_none());
}

#[test]
fn grad_check_examples() {
    let mut rng = Rng::new(5, 0);
    let ints = Tensor::<f64>::randn(&[3, 4], &mut rng).map(|v| (8.0 * v).round());
    assert_eq!(grad_check(|t, v| Ok(t.sum(v)), &ints, 1e-5).unwrap(), 0.0);
    let x = Tensor::randn(&[3, 4], &mut rng);
    assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap() < 1e-9);

    let zero = Tensor::zeros(&[5]);
    let mut t = Tape::new();
    let v = t.leaf(zero.clone());
    let y = t.silu(v);
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(t.grad(v).unwrap().data().iter().all(|&g| g == 0.5));
    assert!(grad_check(|t, v| Ok({
        let y = t.silu(v);
        t.sum(y)
    }), &zero, 1e-5)
    .unwrap()
        < 1e-8);

    let bad = grad_check(|t, v| Ok({
        let y = t.scale(v, f64::NAN);
        t.sum(y)
    }), &zero, 1e-5);
    assert!(matches!(bad, Err(TensorError::NonFinite(_))));
    assert!(grad_check(|t, v| Ok(t.sum(v)), &zero, 0.0).is_err());
}

#[test]
fn matmul_error_names_shapes() {
    let mut t: Tape<f64> = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2, 3]));
    let b = t.leaf(Tensor::zeros(&[4, 5]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn gather_rows_rejects_non_permutations() {
    let mut t: Tape<f64> = Tape::new();
    let a = t.leaf(Tensor::zeros(&[1, 3, 2]));
    assert!(t.gather_rows(a, Arc::from(vec![0, 0, 1])).is_err());
    assert!(t.gather_rows(a, Arc::from(vec![0, 1, 3])).is_err());
}

#[test]
fn rel_l2_and_grid_gradient_values() {
    let truth = Tensor::from_f64(&[2, 2, 1], &[3.0, 4.0, 1.0, 0.0]).unwrap();
    let mut t: Tape<f64> = Tape::new();
    for (pred, want) in [(truth.clone(), 0.0), (Tensor::zeros(&[2, 2, 1]), 1.0), (truth.scale(2.0), 1.0)] {
        let p = t.constant(pred);
        let l = t.rel_l2(p, &truth).unwrap();
        assert!((t.value(l).item() - want).abs() < 1e-15);
    }
    // f(r, c) = 2c + 3r² on a 3x3 grid.
    let f: Vec<f64> = (0..9).map(|i| 2.0 * (i % 3) as f64 + 3.0 * ((i / 3) as f64).powi(2)).collect();
    let x = t.constant(Tensor::from_f64(&[1, 9, 1], &f).unwrap());
    let g = t.grid_gradient(x, 3, 3).unwrap();
    let gv = t.value(g).data();
    for i in 0..9 {
        assert_eq!(gv[2 * i], 2.0);
    }
    // Rows: one-sided 3, central 6, one-sided 9.
    assert_eq!([gv[1], gv[7], gv[13]], [3.0, 6.0, 9.0]);
}
