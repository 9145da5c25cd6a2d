use crate::tensor::{Scalar, Tensor};

use super::{DiscreteStep, SsmError};

/// Largest `L` accepted by [`materialize_matrix`].
pub const MATRIX_LEN_CAP: usize = 512;

/// A time-invariant diagonal system, evaluable as a causal convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiSystem<T> {
    pub channels: usize,
    pub state: usize,
    /// `[C×P]` each.
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
    pub c: Vec<T>,
    /// `[C]`
    pub skip: Vec<T>,
}

impl<T: Scalar> LtiSystem<T> {
    /// Extracts the shared coefficients; fails if any step differs from the first.
    pub fn from_step(d: &DiscreteStep<T>) -> Result<Self, SsmError> {
        let cp = d.channels * d.state;
        for t in 1..d.len {
            let r = t * cp..(t + 1) * cp;
            if d.a_bar[r.clone()] != d.a_bar[..cp] || d.b_bar[r.clone()] != d.b_bar[..cp] || d.c[r] != d.c[..cp] {
                return Err(SsmError::TimeVarying { step: t });
            }
        }
        Ok(LtiSystem {
            channels: d.channels,
            state: d.state,
            a_bar: d.a_bar[..cp].to_vec(),
            b_bar: d.b_bar[..cp].to_vec(),
            c: d.c[..cp].to_vec(),
            skip: d.skip.clone(),
        })
    }

    /// `K[c, j] = Σ_p C·Āʲ·B̄`, returned as `[C×L]`.
    pub fn kernel(&self, len: usize) -> Tensor<T> {
        let (c, p) = (self.channels, self.state);
        let mut k = vec![T::zero(); c * len];
        for ch in 0..c {
            for s in 0..p {
                let i = ch * p + s;
                let mut pow = T::one();
                for j in 0..len {
                    k[ch * len + j] += self.c[i] * pow * self.b_bar[i];
                    pow = pow * self.a_bar[i];
                }
            }
        }
        Tensor::new(&[c, len], k).unwrap()
    }

    /// Causal convolution `y = x ∗ K` plus the direct term; `x: [L×C]`.
    pub fn apply(&self, x: &[T]) -> Result<Tensor<T>, SsmError> {
        let c = self.channels;
        if c == 0 || x.len() % c != 0 {
            return Err(SsmError::Shape(format!("x length {} not a multiple of C = {c}", x.len())));
        }
        let len = x.len() / c;
        let k = self.kernel(len);
        let k = k.data();
        let mut y = vec![T::zero(); len * c];
        for t in 0..len {
            for ch in 0..c {
                let mut acc = T::zero();
                for j in 0..=t {
                    acc += k[ch * len + j] * x[(t - j) * c + ch];
                }
                y[t * c + ch] = acc + self.skip[ch] * x[t * c + ch];
            }
        }
        Ok(Tensor::new(&[len, c], y)?)
    }
}

/// The causal operator `M[c, i, j] = Σ_p C_i ∏_{k=j+1}^{i} Ā_k B̄_j` for
/// every channel, as `[C×L×L]`. The direct term is not included.
pub fn materialize_matrix<T: Scalar>(d: &DiscreteStep<T>) -> Result<Tensor<T>, SsmError> {
    if d.len > MATRIX_LEN_CAP {
        return Err(SsmError::OverCap {
            len: d.len,
            cap: MATRIX_LEN_CAP,
        });
    }
    let (len, c, p) = (d.len, d.channels, d.state);
    let mut m = vec![T::zero(); c * len * len];
    for ch in 0..c {
        for s in 0..p {
            for j in 0..len {
                let mut carry = d.b_bar[(j * c + ch) * p + s];
                for i in j..len {
                    let idx = (i * c + ch) * p + s;
                    if i > j {
                        carry = carry * d.a_bar[idx];
                    }
                    m[(ch * len + i) * len + j] += d.c[idx] * carry;
                }
            }
        }
    }
    Ok(Tensor::new(&[c, len, len], m)?)
}

/// `y = M·x + skip⊙x` for a materialized operator and `x: [L×C]`.
pub fn apply_matrix<T: Scalar>(m: &Tensor<T>, x: &[T], skip: &[T]) -> Tensor<T> {
    let (c, len) = (m.shape()[0], m.shape()[1]);
    let md = m.data();
    let mut y = vec![T::zero(); len * c];
    for ch in 0..c {
        for i in 0..len {
            let mut acc = T::zero();
            for j in 0..=i {
                acc += md[(ch * len + i) * len + j] * x[j * c + ch];
            }
            y[i * c + ch] = acc + skip[ch] * x[i * c + ch];
        }
    }
    Tensor::new(&[len, c], y).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::scan_sequential;
    use crate::tensor::Rng;

    #[test]
    fn kernel_example() {
        let sys = LtiSystem {
            channels: 1,
            state: 1,
            a_bar: vec![0.5f64],
            b_bar: vec![1.0],
            c: vec![1.0],
            skip: vec![0.0],
        };
        assert_eq!(sys.kernel(3).data(), &[1.0, 0.5, 0.25]);
        assert_eq!(sys.apply(&[1.0, 0.0, 0.0]).unwrap().data(), &[1.0, 0.5, 0.25]);
        let memoryless = LtiSystem {
            a_bar: vec![0.0],
            b_bar: vec![2.0],
            c: vec![3.0],
            ..sys
        };
        assert_eq!(memoryless.kernel(4).data(), &[6.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn time_varying_is_rejected() {
        let d = DiscreteStep::new((2, 1, 1), vec![0.5, 0.6], vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0]).unwrap();
        assert!(matches!(LtiSystem::from_step(&d), Err(SsmError::TimeVarying { step: 1 })));
    }

    #[test]
    fn matrix_example_and_causality() {
        let d = DiscreteStep::new((2, 1, 1), vec![0.5, 0.5], vec![1.0, 1.0], vec![1.0, 2.0], vec![1.0, 1.0], vec![0.0]).unwrap();
        let m = materialize_matrix(&d).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 1.0, 2.0]);
        assert_eq!(apply_matrix(&m, &[1.0, 1.0], &[0.0]).data(), &[1.0, 3.0]);
    }

    #[test]
    fn matrix_refuses_long_sequences() {
        let n = MATRIX_LEN_CAP + 1;
        let d = DiscreteStep::new((n, 1, 1), vec![0.5; n], vec![1.0; n], vec![1.0; n], vec![1.0; n], vec![0.0]).unwrap();
        assert!(matches!(materialize_matrix(&d), Err(SsmError::OverCap { .. })));
    }

    #[test]
    fn random_matrix_and_kernel_match_scan() {
        let mut rng = Rng::new(21, 0);
        let (len, c, p) = (64, 3, 4);
        let lcp = len * c * p;
        let d = DiscreteStep::new(
            (len, c, p),
            (0..lcp).map(|_| rng.uniform(0.3, 0.99)).collect(),
            (0..lcp).map(|_| rng.normal()).collect(),
            (0..lcp).map(|_| rng.normal()).collect(),
            (0..len * c).map(|_| rng.normal()).collect(),
            (0..c).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let (y, _) = scan_sequential(&d, &vec![0.0; c * p]).unwrap();
        let m = materialize_matrix(&d).unwrap();
        let md = m.data();
        for ch in 0..c {
            for i in 0..len {
                for j in i + 1..len {
                    assert_eq!(md[(ch * len + i) * len + j], 0.0);
                }
            }
        }
        assert!(apply_matrix(&m, &d.x, &d.skip).max_abs_diff(&y) < 1e-10);

        let cp = c * p;
        let lti = DiscreteStep::repeated(len, &d.a_bar[..cp], &d.b_bar[..cp], &d.c[..cp], d.x.clone(), d.skip.clone()).unwrap();
        let sys = LtiSystem::from_step(&lti).unwrap();
        let (y_lti, _) = scan_sequential(&lti, &vec![0.0; cp]).unwrap();
        assert!(sys.apply(&lti.x).unwrap().max_abs_diff(&y_lti) < 1e-10);
    }
}
