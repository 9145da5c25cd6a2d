//! AdamW with decoupled weight decay and the one-cycle learning-rate shape.

use std::f64::consts::PI;

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        OptState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

impl AdamW {
    /// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p` with bias-corrected moments.
    pub fn step<T: Scalar>(&self, params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut OptState<T>, lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let (lr_t, decay) = (T::of(lr), T::of(lr * self.weight_decay));
        let (ibc1, ibc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape for parameter {i}");
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] * ibc1;
                let vh = v[j] * ibc2;
                *pj = *pj - lr_t * mh / (vh.sqrt() + eps) - decay * *pj;
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-12));
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div: f64,
}

impl OneCycle {
    /// Cosine warmup from `max_lr/div_factor` to `max_lr` over the first
    /// `pct_start·total` steps, then cosine decay to `max_lr/final_div`.
    pub fn lr(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1) as f64;
        let s = (step as f64).min(total);
        let peak = self.pct_start * total;
        let lo = self.max_lr / self.div_factor;
        let end = self.max_lr / self.final_div;
        let cos = |from: f64, to: f64, frac: f64| from + (to - from) * 0.5 * (1.0 - (PI * frac).cos());
        if s < peak {
            cos(lo, self.max_lr, s / peak)
        } else {
            let rest = total - peak;
            let frac = if rest > 0.0 { (s - peak) / rest } else { 1.0 };
            cos(self.max_lr, end, frac)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> OneCycle {
        OneCycle {
            max_lr: 1e-3,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div: 1e4,
        }
    }

    #[test]
    fn onecycle_endpoints_and_shape() {
        let s = sched();
        assert!((s.lr(0, 1000) - 4e-5).abs() < 1e-18);
        assert_eq!(s.lr(300, 1000), 1e-3);
        assert!((s.lr(1000, 1000) - 1e-7).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=1000).map(|i| s.lr(i, 1000)).collect();
        assert!(lrs[..=300].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[300..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adamw_cases() {
        let opt = AdamW::default();
        let mut p = vec![Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap()];
        let mut st = OptState::new(&p);
        opt.step(&mut p, &[Tensor::zeros(&[2])], &mut st, 0.1);
        assert_eq!(p[0].data(), &[1.0, -2.0]);

        let wd = AdamW {
            weight_decay: 0.5,
            ..AdamW::default()
        };
        wd.step(&mut p, &[Tensor::zeros(&[2])], &mut st, 0.1);
        assert_eq!(p[0].data(), &[0.95, -1.9]);

        let mut q = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = OptState::new(&q);
        opt.step(&mut q, &[Tensor::scalar(1.0)], &mut st, 1e-3);
        assert!((q[0].item() + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adamw_sign_flip_is_exact() {
        let opt = AdamW::default();
        let g = Tensor::<f64>::from_f64(&[3], &[0.3, -1.7, 2e-4]).unwrap();
        let (mut a, mut b) = (vec![Tensor::zeros(&[3])], vec![Tensor::zeros(&[3])]);
        let (mut sa, mut sb) = (OptState::new(&a), OptState::new(&b));
        for _ in 0..5 {
            opt.step(&mut a, &[g.clone()], &mut sa, 1e-2);
            opt.step(&mut b, &[g.scale(-1.0)], &mut sb, 1e-2);
        }
        for (x, y) in a[0].data().iter().zip(b[0].data()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[0.3, 0.4]).unwrap()];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }
}
