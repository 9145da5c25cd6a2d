//! Random instances of every differentiable op for gradient checking.

use std::sync::Arc;

use crate::arch::PatchGeom;
use crate::ssm::ZohMode;
use crate::tensor::{Rng, Tensor, TensorError};

use super::{OpKind, Tape, Var};

type R = Result<Var, TensorError>;

/// A scalar test function and the inputs it is evaluated at.
pub type OpCase = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> R>);

fn rand(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Random instance of `kind`, wrapped in a random linear functional so every
/// output coordinate carries an O(1) weight.
pub fn random_case(kind: OpKind, rng: &mut Rng) -> OpCase {
    let (b, n, c) = (dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 4));
    let x3 = [b, n, c];
    let (inputs, op): (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> R>) = match kind {
        OpKind::Leaf => unreachable!(),
        OpKind::MatMul => {
            let k = dim(rng, 1, 4);
            match rng.below(3) {
                0 => (vec![rand(&[b, n, k], -1.0, 1.0, rng), rand(&[k, c], -1.0, 1.0, rng)], Box::new(|t, v| t.matmul(v[0], v[1]))),
                1 => (vec![rand(&[n, k], -1.0, 1.0, rng), rand(&[c, k], -1.0, 1.0, rng)], Box::new(|t, v| t.matmul_t(v[0], v[1], false, true))),
                _ => {
                    let (ta, tb) = (rng.below(2) == 1, rng.below(2) == 1);
                    let sa = if ta { [b, k, n] } else { [b, n, k] };
                    let sb = if tb { [b, c, k] } else { [b, k, c] };
                    (vec![rand(&sa, -1.0, 1.0, rng), rand(&sb, -1.0, 1.0, rng)], Box::new(move |t, v| t.matmul_t(v[0], v[1], ta, tb)))
                }
            }
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let rhs: Vec<usize> = x3[rng.below(3)..].to_vec();
            let ins = vec![rand(&x3, -1.0, 1.0, rng), rand(&rhs, -1.0, 1.0, rng)];
            let f: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> R> = match kind {
                OpKind::Add => Box::new(|t, v| t.add(v[0], v[1])),
                OpKind::Sub => Box::new(|t, v| t.sub(v[0], v[1])),
                _ => Box::new(|t, v| t.mul(v[0], v[1])),
            };
            (ins, f)
        }
        OpKind::Scale => {
            let s = rng.uniform(-2.0, 2.0);
            (vec![rand(&x3, -1.0, 1.0, rng)], Box::new(move |t, v| Ok(t.scale(v[0], s))))
        }
        OpKind::Silu => (vec![rand(&x3, -4.0, 4.0, rng)], Box::new(|t, v| Ok(t.silu(v[0])))),
        OpKind::Softplus => (vec![rand(&x3, -8.0, 25.0, rng)], Box::new(|t, v| Ok(t.softplus(v[0])))),
        OpKind::Exp => (vec![rand(&x3, -2.0, 2.0, rng)], Box::new(|t, v| Ok(t.exp(v[0])))),
        OpKind::Softmax => {
            let axis = rng.below(3);
            (vec![rand(&x3, -2.0, 2.0, rng)], Box::new(move |t, v| t.softmax(v[0], axis)))
        }
        OpKind::LayerNorm => {
            let c = c + 1;
            let ins = vec![rand(&[b, n, c], -2.0, 2.0, rng), rand(&[c], 0.5, 1.5, rng), rand(&[c], -1.0, 1.0, rng)];
            (ins, Box::new(|t, v| t.layernorm(v[0], v[1], v[2], 1e-5)))
        }
        OpKind::Sum => (vec![rand(&x3, -1.0, 1.0, rng)], Box::new(|t, v| Ok(t.sum(v[0])))),
        OpKind::Mean => (vec![rand(&x3, -1.0, 1.0, rng)], Box::new(|t, v| Ok(t.mean(v[0])))),
        OpKind::SumAxis => {
            let axis = rng.below(3);
            (vec![rand(&x3, -1.0, 1.0, rng)], Box::new(move |t, v| t.sum_axis(v[0], axis)))
        }
        OpKind::RowDiv => (
            vec![rand(&x3, -1.0, 1.0, rng), rand(&[b, n], 0.5, 2.0, rng)],
            Box::new(|t, v| t.row_div(v[0], v[1], 1e-8)),
        ),
        OpKind::GatherRows => {
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let perm: Arc<[usize]> = perm.into();
            (vec![rand(&x3, -1.0, 1.0, rng)], Box::new(move |t, v| t.gather_rows(v[0], perm.clone())))
        }
        OpKind::CausalConv => {
            let k = dim(rng, 1, 4);
            let ins = vec![rand(&x3, -1.0, 1.0, rng), rand(&[c, k], -1.0, 1.0, rng), rand(&[c], -1.0, 1.0, rng)];
            (ins, Box::new(|t, v| t.causal_conv(v[0], v[1], v[2])))
        }
        OpKind::SelectiveScan => {
            let (len, p) = (dim(rng, 1, 9), dim(rng, 1, 4));
            let mode = if rng.below(2) == 0 { ZohMode::Exact } else { ZohMode::Simplified };
            let ins = vec![
                rand(&[b, len, c], -1.0, 1.0, rng),
                rand(&[b, len, c], 0.01, 0.5, rng),
                rand(&[c, p], -1.0, 1.5, rng),
                rand(&[b, len, p], -1.0, 1.0, rng),
                rand(&[b, len, p], -1.0, 1.0, rng),
                rand(&[c], -1.0, 1.0, rng),
            ];
            (ins, Box::new(move |t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], mode)))
        }
        OpKind::Patchify | OpKind::Unpatchify => {
            let (ph, pw, mh, mw) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            let g = PatchGeom::new((ph * mh, pw * mw), (ph, pw)).unwrap();
            if kind == OpKind::Patchify {
                (vec![rand(&[b, g.points(), c], -1.0, 1.0, rng)], Box::new(move |t, v| t.patchify(v[0], g)))
            } else {
                (vec![rand(&[b, g.tokens(), c], -1.0, 1.0, rng)], Box::new(move |t, v| t.unpatchify(v[0], g)))
            }
        }
        OpKind::SliceLast => {
            let d = c + 2;
            let start = rng.below(d);
            let len = 1 + rng.below(d - start);
            (vec![rand(&[b, n, d], -1.0, 1.0, rng)], Box::new(move |t, v| t.slice_last(v[0], start, len)))
        }
        OpKind::ConcatLast => {
            let parts = dim(rng, 1, 3);
            let ins = (0..parts).map(|_| {
                let w = dim(rng, 1, 3);
                rand(&[b, n, w], -1.0, 1.0, rng)
            });
            (ins.collect(), Box::new(|t, v| t.concat_last(v)))
        }
        OpKind::RelL2 => {
            let truth = rand(&x3, -1.0, 1.0, rng);
            (vec![rand(&x3, -1.0, 1.0, rng)], Box::new(move |t, v| t.rel_l2(v[0], &truth)))
        }
        OpKind::GridGradient => {
            let (h, w) = (dim(rng, 2, 4), dim(rng, 2, 4));
            (vec![rand(&[b, h * w, c], -1.0, 1.0, rng)], Box::new(move |t, v| t.grid_gradient(v[0], h, w)))
        }
    };
    let seed = rng.next_u64();
    let f = move |t: &mut Tape<f64>, v: &[Var]| -> R {
        let y = op(t, v)?;
        let mut r = Rng::new(seed, 1);
        let w = t.constant(Tensor::uniform(t.shape(y), 0.5, 1.5, &mut r));
        let yw = t.mul(y, w)?;
        Ok(t.sum(yw))
    };
    (inputs, Box::new(f))
}

