//! Diagonal selective state-space kernels.
//!
//! The recurrence `h[k] = Ā[k]⊙h[k-1] + B̄[k]·x[k]`, `y[k] = ⟨C[k], h[k]⟩ + D⊙x[k]`
//! is evaluated in four interchangeable ways: left-to-right
//! ([`scan_sequential`]), a chunked balanced-tree scan ([`scan_parallel`]),
//! a causal convolution for time-invariant systems ([`LtiSystem`]) and an
//! explicit lower-triangular operator ([`materialize_matrix`]).
//!
//! `A` is diagonal and realized as `-exp(a_log)`, so it is strictly negative
//! and `Ā = exp(ΔA)` lies in `(0, 1)` whenever `Δ > 0`.

mod forms;
mod scan;
pub mod selective;

use thiserror::Error;

use crate::tensor::{matmul, softplus_scalar, Rng, Scalar, Tensor, TensorError, INV_FACT};

pub use forms::{apply_matrix, materialize_matrix, LtiSystem, MATRIX_LEN_CAP};
pub use scan::{scan_parallel, scan_parallel_threads, scan_sequential, SCAN_CHUNK};

#[derive(Debug, Error)]
pub enum SsmError {
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("parameters vary over time (step {step}); the convolution form needs a time-invariant system")]
    TimeVarying { step: usize },
    #[error("sequence length {len} exceeds the dense-operator cap {cap}")]
    OverCap { len: usize, cap: usize },
    #[error("inconsistent shapes: {0}")]
    Shape(String),
}

/// How `B̄` is formed from `Δ`, `A` and `B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ZohMode {
    /// `B̄ = (exp(ΔA) - 1)/A · B`.
    Exact,
    /// `B̄ = Δ·B`, the first-order truncation.
    Simplified,
}

impl ZohMode {
    pub fn name(self) -> &'static str {
        match self {
            ZohMode::Exact => "exact",
            ZohMode::Simplified => "simplified",
        }
    }
}

impl std::str::FromStr for ZohMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exact" => Ok(ZohMode::Exact),
            "simplified" => Ok(ZohMode::Simplified),
            _ => Err(format!("unknown zoh mode {s:?} (exact|simplified)")),
        }
    }
}

/// Below this `|z|` the row kernel evaluates `φ'` by series.
pub const PHI_SERIES_BELOW: f64 = 0.5;

/// Step coefficients for one channel over its states: `Ā = e^z`,
/// `φ(z)` and `φ'(z)` with `z = Δ·a`.
///
/// `z = k ln2 + r` with `|r| ≤ ln2/2`, and one polynomial gives
/// `S(r) = (e^r - 1)/r`. Then `e^z = 2^k (1 + rS)` and, for `k ≠ 0`,
/// `e^z - 1 = 2^k rS + (2^k - 1)` with no cancellation; for `k = 0`,
/// `φ = S`. `φ'` cancels near zero, so it switches to its own series
/// below [`PHI_SERIES_BELOW`]. `φ'` is written only when `GRAD` is set.
/// Everything is computed and selected so the loop vectorizes.
#[inline]
pub fn zoh_row<T: Scalar, const GRAD: bool>(dt: T, a: &[T], abar: &mut [T], phi: &mut [T], dphi: &mut [T]) {
    let n = a.len();
    let (abar, phi, dphi) = (&mut abar[..n], &mut phi[..n], &mut dphi[..n]);
    let one = T::one();
    let lim = T::of(T::EXP_LIMIT);
    let magic = T::of(T::ROUND_MAGIC);
    let terms = T::EXP_TERMS;
    for p in 0..n {
        let z = dt * a[p];
        let zc = if z < -lim {
            -lim
        } else if z > lim {
            lim
        } else {
            z
        };
        let k = (zc * T::of(std::f64::consts::LOG2_E) + magic) - magic;
        let r = (zc - k * T::of(T::LN2_HI)) - k * T::of(T::LN2_LO);
        let mut s = T::of(INV_FACT[terms]);
        for j in (0..terms).rev() {
            s = s * r + T::of(INV_FACT[j + 1]);
        }
        let scale = k.pow2i();
        let rs = r * s;
        let e = scale * (one + rs);
        let em1 = scale * rs + (scale - one);
        let reduced = k == T::zero();
        abar[p] = e;
        phi[p] = if reduced { s } else { em1 / z };
        if GRAD {
            let mut ds = T::of(terms as f64 * INV_FACT[terms + 1]);
            for j in (0..terms - 1).rev() {
                ds = ds * z + T::of((j + 1) as f64 * INV_FACT[j + 2]);
            }
            let small = z.abs() < T::of(PHI_SERIES_BELOW);
            dphi[p] = if small { ds } else { (z * e - em1) / (z * z) };
        }
    }
}

/// Below this `|z|`, `φ(z) = (e^z - 1)/z` uses its Taylor expansion.
pub const PHI_TAYLOR_BELOW: f64 = 1e-4;

/// `φ(z) = (e^z - 1)/z` given `em1 = e^z - 1`; `φ(0) = 1`.
#[inline]
pub fn zoh_phi<T: Scalar>(z: T, em1: T) -> T {
    if z.abs() < T::of(PHI_TAYLOR_BELOW) {
        T::one() + z * (T::of(0.5) + z * (T::of(1.0 / 6.0) + z * T::of(1.0 / 24.0)))
    } else {
        em1 / z
    }
}

/// `φ'(z) = (z e^z - e^z + 1)/z²`. The closed form cancels badly near zero,
/// so the series `Σ k z^(k-1)/(k+1)!` is used for `|z| < 0.5`.
#[inline]
pub fn zoh_phi_grad<T: Scalar>(z: T, abar: T, em1: T) -> T {
    if z.abs() < T::of(0.5) {
        // Coefficients (j+1)/(j+2)!.
        (0..14).rev().fold(T::zero(), |acc, j| acc * z + T::of((j + 1) as f64 * INV_FACT[j + 2]))
    } else {
        (z * abar - em1) / (z * z)
    }
}

/// Discrete coefficients `(Ā, B̄/B)` for a single diagonal entry.
pub fn zoh_coefficients<T: Scalar>(a: T, delta: T, mode: ZohMode) -> (T, T) {
    let z = delta * a;
    let em1 = z.exp_m1();
    let per_b = match mode {
        ZohMode::Exact => delta * zoh_phi(z, em1),
        ZohMode::Simplified => delta,
    };
    (T::one() + em1, per_b)
}

/// Parameters of one diagonal selective SSM over `C` channels with `P`
/// states per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagSsmParams<T> {
    /// `[C×P]`, realized `A = -exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `[C×C]`, pre-softplus step projection.
    pub delta_weight: Tensor<T>,
    /// `[C]`
    pub delta_bias: Tensor<T>,
    /// `[C×P]` and `[P]`
    pub b_weight: Tensor<T>,
    pub b_bias: Tensor<T>,
    /// `[C×P]` and `[P]`
    pub c_weight: Tensor<T>,
    pub c_bias: Tensor<T>,
    /// `[C]`, the direct term.
    pub skip: Tensor<T>,
}

impl<T: Scalar> DiagSsmParams<T> {
    /// Standard initialization: `-A ∈ {1..P}` per state index, `Δ₀`
    /// log-uniform in `[1e-3, 1e-1]`, projections uniform `±1/√C`,
    /// unit skip.
    pub fn init(channels: usize, state: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let a_log = Tensor::from_f64(
            &[channels, state],
            &(0..channels * state)
                .map(|i| ((i % state) as f64 + 1.0).ln())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let delta_bias = Tensor::from_f64(
            &[channels],
            &(0..channels)
                .map(|_| {
                    let d0 = (rng.uniform(1e-3f64.ln(), 1e-1f64.ln())).exp();
                    d0.exp_m1().ln()
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        DiagSsmParams {
            a_log,
            delta_weight: Tensor::uniform(&[channels, channels], -bound, bound, rng),
            delta_bias,
            b_weight: Tensor::uniform(&[channels, state], -bound, bound, rng),
            b_bias: Tensor::zeros(&[state]),
            c_weight: Tensor::uniform(&[channels, state], -bound, bound, rng),
            c_bias: Tensor::zeros(&[state]),
            skip: Tensor::ones(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.shape()[1]
    }
}

/// Discretized, input-bound recurrence over `L` steps, `C` channels and
/// `P` states. All `[L×C×P]` buffers are step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteStep<T> {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub a_bar: Vec<T>,
    /// `B̄` before multiplication by the input.
    pub b_bar: Vec<T>,
    pub c: Vec<T>,
    /// `[L×C]`
    pub x: Vec<T>,
    /// `[C]`; zeros disable the direct term.
    pub skip: Vec<T>,
}

impl<T: Scalar> DiscreteStep<T> {
    pub fn new(
        (len, channels, state): (usize, usize, usize),
        a_bar: Vec<T>,
        b_bar: Vec<T>,
        c: Vec<T>,
        x: Vec<T>,
        skip: Vec<T>,
    ) -> Result<Self, SsmError> {
        let lcp = len * channels * state;
        if a_bar.len() != lcp || b_bar.len() != lcp || c.len() != lcp {
            return Err(SsmError::Shape(format!(
                "coefficient buffers must hold L·C·P = {lcp} entries"
            )));
        }
        if x.len() != len * channels || skip.len() != channels {
            return Err(SsmError::Shape(format!(
                "x must be L×C = {} and skip C = {channels}",
                len * channels
            )));
        }
        if len == 0 {
            return Err(SsmError::Shape("sequence length must be at least 1".into()));
        }
        Ok(DiscreteStep {
            len,
            channels,
            state,
            a_bar,
            b_bar,
            c,
            x,
            skip,
        })
    }

    /// Time-invariant coefficients repeated over `len` steps.
    pub fn repeated(
        len: usize,
        a_bar: &[T],
        b_bar: &[T],
        c: &[T],
        x: Vec<T>,
        skip: Vec<T>,
    ) -> Result<Self, SsmError> {
        let channels = skip.len();
        let cp = a_bar.len();
        if channels == 0 || cp % channels != 0 || b_bar.len() != cp || c.len() != cp {
            return Err(SsmError::Shape("coefficients must be C×P".into()));
        }
        let rep = |v: &[T]| v.iter().copied().cycle().take(len * cp).collect::<Vec<_>>();
        Self::new((len, channels, cp / channels), rep(a_bar), rep(b_bar), rep(c), x, skip)
    }

    #[inline]
    pub fn b_bar_x(&self, t: usize, ch: usize, p: usize) -> T {
        let i = (t * self.channels + ch) * self.state + p;
        self.b_bar[i] * self.x[t * self.channels + ch]
    }

    /// The same frozen coefficients driven by a different input.
    pub fn with_input(&self, x: Vec<T>) -> Result<Self, SsmError> {
        if x.len() != self.x.len() {
            return Err(SsmError::Shape(format!(
                "input length {} != {}",
                x.len(),
                self.x.len()
            )));
        }
        Ok(DiscreteStep { x, ..self.clone() })
    }

    pub fn without_skip(&self) -> Self {
        DiscreteStep {
            skip: vec![T::zero(); self.channels],
            ..self.clone()
        }
    }
}

/// Projects `x: [L×C]` through the selective maps and discretizes.
pub fn zoh_discretize<T: Scalar>(
    params: &DiagSsmParams<T>,
    x: &Tensor<T>,
    mode: ZohMode,
) -> Result<DiscreteStep<T>, SsmError> {
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(SsmError::NonFinite(i));
    }
    let channels = params.channels();
    let state = params.state();
    if x.rank() != 2 || x.shape()[1] != channels {
        return Err(SsmError::Shape(format!(
            "x must be [L, {channels}], got {:?}",
            x.shape()
        )));
    }
    let len = x.shape()[0];
    let delta = matmul(x, &params.delta_weight)?
        .add(&params.delta_bias)?
        .map(softplus_scalar);
    let b = matmul(x, &params.b_weight)?.add(&params.b_bias)?;
    let c = matmul(x, &params.c_weight)?.add(&params.c_bias)?;
    discretize_projected(
        (len, channels, state),
        delta.data(),
        params.a_log.data(),
        b.data(),
        c.data(),
        x.data(),
        params.skip.data(),
        mode,
    )
}

/// Discretizes already-projected selective parameters:
/// `delta: [L×C]`, `a_log: [C×P]`, `b, c: [L×P]`.
#[allow(clippy::too_many_arguments)]
pub fn discretize_projected<T: Scalar>(
    (len, channels, state): (usize, usize, usize),
    delta: &[T],
    a_log: &[T],
    b: &[T],
    c: &[T],
    x: &[T],
    skip: &[T],
    mode: ZohMode,
) -> Result<DiscreteStep<T>, SsmError> {
    let lcp = len * channels * state;
    let mut a_bar = Vec::with_capacity(lcp);
    let mut b_bar = Vec::with_capacity(lcp);
    let mut cc = Vec::with_capacity(lcp);
    for t in 0..len {
        for ch in 0..channels {
            let dt = delta[t * channels + ch];
            for p in 0..state {
                let a = -a_log[ch * state + p].exp();
                let (ab, per_b) = zoh_coefficients(a, dt, mode);
                a_bar.push(ab);
                b_bar.push(per_b * b[t * state + p]);
                cc.push(c[t * state + p]);
            }
        }
    }
    DiscreteStep::new((len, channels, state), a_bar, b_bar, cc, x.to_vec(), skip.to_vec())
}
