//! Fused selective scan: ZOH discretization, recurrence, readout and skip,
//! with a checkpointed reverse pass.
//!
//! Shapes for one sequence: `u, delta: [L×C]`, `a_log: [C×P]`,
//! `b, c: [L×P]`, `skip: [C]`. Realized `A = -exp(a_log)`.

use crate::tensor::Scalar;

use crate::tensor::exp_poly;

use super::{zoh_row, ZohMode};

/// Steps between stored states in the forward pass.
pub const CHECKPOINT_EVERY: usize = 64;

#[derive(Clone, Copy, Debug)]
pub struct SelectiveDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

#[derive(Clone, Copy)]
pub struct SelectiveInputs<'a, T> {
    pub dims: SelectiveDims,
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a_log: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub skip: &'a [T],
    pub mode: ZohMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a_log: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub skip: Vec<T>,
}

impl<T: Scalar> SelectiveGrads<T> {
    pub fn zeros(d: SelectiveDims) -> Self {
        let SelectiveDims {
            len,
            channels,
            state,
        } = d;
        SelectiveGrads {
            u: vec![T::zero(); len * channels],
            delta: vec![T::zero(); len * channels],
            a_log: vec![T::zero(); channels * state],
            b: vec![T::zero(); len * state],
            c: vec![T::zero(); len * state],
            skip: vec![T::zero(); channels],
        }
    }
}

impl<'a, T: Scalar> SelectiveInputs<'a, T> {
    fn check(&self) {
        let SelectiveDims {
            len,
            channels,
            state,
        } = self.dims;
        assert_eq!(self.u.len(), len * channels);
        assert_eq!(self.delta.len(), len * channels);
        assert_eq!(self.a_log.len(), channels * state);
        assert_eq!(self.b.len(), len * state);
        assert_eq!(self.c.len(), len * state);
        assert_eq!(self.skip.len(), channels);
    }

    fn realized_a(&self) -> Vec<T> {
        self.a_log.iter().map(|&v| -v.exp()).collect()
    }

    /// Runs the scan from a zero state. Returns the readout `y: [L×C]` and
    /// the states at every chunk boundary.
    pub fn forward(&self) -> (Vec<T>, Vec<T>) {
        self.check();
        let SelectiveDims {
            len,
            channels,
            state,
        } = self.dims;
        let a = self.realized_a();
        let cp = channels * state;
        let mut h = vec![T::zero(); cp];
        let mut y = vec![T::zero(); len * channels];
        let mut checkpoints = Vec::with_capacity(len.div_ceil(CHECKPOINT_EVERY) * cp);
        let exact = self.mode == ZohMode::Exact;
        let (mut abar, mut phi, mut unused) = (vec![T::zero(); state], vec![T::one(); state], vec![T::zero(); state]);
        for t in 0..len {
            if t % CHECKPOINT_EVERY == 0 {
                checkpoints.extend_from_slice(&h);
            }
            let bt = &self.b[t * state..(t + 1) * state];
            let ct = &self.c[t * state..(t + 1) * state];
            for ch in 0..channels {
                let dt = self.delta[t * channels + ch];
                let ut = self.u[t * channels + ch];
                let hrow = &mut h[ch * state..(ch + 1) * state];
                let arow = &a[ch * state..(ch + 1) * state];
                if exact {
                    zoh_row::<T, false>(dt, arow, &mut abar, &mut phi, &mut unused);
                } else {
                    for (o, &ap) in abar.iter_mut().zip(arow) {
                        *o = exp_poly(dt * ap);
                    }
                }
                for p in 0..state {
                    hrow[p] = abar[p] * hrow[p] + dt * phi[p] * bt[p] * ut;
                }
                let acc = ct.iter().zip(hrow.iter()).fold(T::zero(), |s, (&c, &hv)| s + c * hv);
                y[t * channels + ch] = acc + self.skip[ch] * ut;
            }
        }
        (y, checkpoints)
    }

    /// Reverse pass given the upstream gradient `gy: [L×C]`; states are
    /// recomputed chunk by chunk from the forward checkpoints.
    pub fn backward(&self, checkpoints: &[T], gy: &[T]) -> SelectiveGrads<T> {
        self.check();
        let dims = self.dims;
        let SelectiveDims {
            len,
            channels,
            state,
        } = dims;
        assert_eq!(gy.len(), len * channels);
        let cp = channels * state;
        assert_eq!(checkpoints.len(), len.div_ceil(CHECKPOINT_EVERY) * cp);
        let a = self.realized_a();
        let exact = self.mode == ZohMode::Exact;
        let mut g = SelectiveGrads::zeros(dims);
        let mut d_a = vec![T::zero(); cp];
        let mut gh = vec![T::zero(); cp];

        // Per-chunk buffers, one row of `cp` per step: the state entering the
        // step, Ā, φ and φ'.
        let mut prevs = vec![T::zero(); CHECKPOINT_EVERY * cp];
        let mut abars = vec![T::zero(); CHECKPOINT_EVERY * cp];
        let mut phis = vec![T::one(); CHECKPOINT_EVERY * cp];
        let mut dphis = vec![T::zero(); CHECKPOINT_EVERY * cp];
        let mut h = vec![T::zero(); cp];
        let (mut du_terms, mut dd_terms) = (vec![T::zero(); state], vec![T::zero(); state]);

        for chunk in (0..len.div_ceil(CHECKPOINT_EVERY)).rev() {
            let start = chunk * CHECKPOINT_EVERY;
            let end = (start + CHECKPOINT_EVERY).min(len);
            h.copy_from_slice(&checkpoints[chunk * cp..(chunk + 1) * cp]);

            for t in start..end {
                let row = (t - start) * cp;
                let bt = &self.b[t * state..(t + 1) * state];
                prevs[row..row + cp].copy_from_slice(&h);
                for ch in 0..channels {
                    let dt = self.delta[t * channels + ch];
                    let ut = self.u[t * channels + ch];
                    let r = row + ch * state..row + (ch + 1) * state;
                    let hrow = &mut h[ch * state..(ch + 1) * state];
                    let arow = &a[ch * state..(ch + 1) * state];
                    let (abar_row, phi_row, dphi_row) = (&mut abars[r.clone()], &mut phis[r.clone()], &mut dphis[r]);
                    if exact {
                        zoh_row::<T, true>(dt, arow, abar_row, phi_row, dphi_row);
                    } else {
                        for (o, &ap) in abar_row.iter_mut().zip(arow) {
                            *o = exp_poly(dt * ap);
                        }
                    }
                    for p in 0..state {
                        hrow[p] = abar_row[p] * hrow[p] + dt * phi_row[p] * bt[p] * ut;
                    }
                }
            }

            for t in (start..end).rev() {
                let row = (t - start) * cp;
                let bt = &self.b[t * state..(t + 1) * state];
                let ct = &self.c[t * state..(t + 1) * state];
                let (gb, gc) = (t * state..(t + 1) * state, t * state..(t + 1) * state);
                for ch in 0..channels {
                    let gyt = gy[t * channels + ch];
                    let dt = self.delta[t * channels + ch];
                    let ut = self.u[t * channels + ch];
                    g.skip[ch] += gyt * ut;
                    let r = row + ch * state..row + (ch + 1) * state;
                    let c = ch * state..(ch + 1) * state;
                    let (prev, abar, phi, dphi) = (&prevs[r.clone()], &abars[r.clone()], &phis[r.clone()], &dphis[r]);
                    let (arow, ghr, dar) = (&a[c.clone()], &mut gh[c.clone()], &mut d_a[c]);
                    let (gbt, gct) = (&mut g.b[gb.clone()], &mut g.c[gc.clone()]);
                    let (du_t, dd_t) = (&mut du_terms[..state], &mut dd_terms[..state]);
                    for p in 0..state {
                        let bbar = dt * phi[p] * bt[p];
                        let ht = abar[p] * prev[p] + bbar * ut;
                        let gt = ghr[p] + ct[p] * gyt;
                        gct[p] += gyt * ht;
                        let d_abar = gt * prev[p];
                        let d_bbar = gt * ut;
                        du_t[p] = gt * bbar;
                        ghr[p] = gt * abar[p];
                        let dz = d_abar * abar[p] + d_bbar * dt * bt[p] * dphi[p];
                        dd_t[p] = dz * arow[p] + d_bbar * phi[p] * bt[p];
                        dar[p] += dz * dt;
                        gbt[p] += d_bbar * dt * phi[p];
                    }
                    let du = du_t.iter().fold(self.skip[ch] * gyt, |s, &v| s + v);
                    let ddelta = dd_t.iter().fold(T::zero(), |s, &v| s + v);
                    g.u[t * channels + ch] = du;
                    g.delta[t * channels + ch] = ddelta;
                }
            }
        }
        for i in 0..cp {
            g.a_log[i] = d_a[i] * a[i];
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn random_case(len: usize, channels: usize, state: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(seed, 0);
        let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.uniform(lo, hi)).collect::<Vec<_>>();
        vec![
            v(len * channels, -1.0, 1.0),
            v(len * channels, 0.01, 0.5),
            v(channels * state, -1.0, 1.5),
            v(len * state, -1.0, 1.0),
            v(len * state, -1.0, 1.0),
            v(channels, -1.0, 1.0),
        ]
    }

    fn inputs(v: &[Vec<f64>], dims: SelectiveDims, mode: ZohMode) -> SelectiveInputs<'_, f64> {
        SelectiveInputs {
            dims,
            u: &v[0],
            delta: &v[1],
            a_log: &v[2],
            b: &v[3],
            c: &v[4],
            skip: &v[5],
            mode,
        }
    }

    /// Scalar objective <w, y> so every output contributes.
    fn objective(v: &[Vec<f64>], dims: SelectiveDims, mode: ZohMode, w: &[f64]) -> f64 {
        let (y, _) = inputs(v, dims, mode).forward();
        y.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        for &(len, mode) in &[(16, ZohMode::Exact), (16, ZohMode::Simplified), (70, ZohMode::Exact)] {
            let dims = SelectiveDims {
                len,
                channels: 3,
                state: 4,
            };
            let v = random_case(len, 3, 4, 7 + len as u64);
            let mut rng = Rng::new(99, 0);
            let w: Vec<f64> = (0..len * 3).map(|_| rng.normal()).collect();
            let inp = inputs(&v, dims, mode);
            let (_, ck) = inp.forward();
            let g = inp.backward(&ck, &w);
            let analytic = [&g.u, &g.delta, &g.a_log, &g.b, &g.c, &g.skip];
            let h = 1e-6;
            for (slot, grad) in analytic.iter().enumerate() {
                for i in 0..grad.len() {
                    let mut plus = v.clone();
                    plus[slot][i] += h;
                    let mut minus = v.clone();
                    minus[slot][i] -= h;
                    let cd = (objective(&plus, dims, mode, &w) - objective(&minus, dims, mode, &w)) / (2.0 * h);
                    let err = (grad[i] - cd).abs() / grad[i].abs().max(cd.abs()).max(1e-6);
                    assert!(err < 1e-5, "slot {slot} idx {i}: {} vs {cd}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let dims = SelectiveDims {
            len: 10,
            channels: 2,
            state: 3,
        };
        let v = random_case(10, 2, 3, 1);
        let inp = inputs(&v, dims, ZohMode::Exact);
        let (_, ck) = inp.forward();
        let g = inp.backward(&ck, &[0.0; 20]);
        assert_eq!(g, SelectiveGrads::zeros(dims));
    }

    #[test]
    fn dead_readout_blocks_state_path() {
        let dims = SelectiveDims {
            len: 8,
            channels: 2,
            state: 3,
        };
        let mut v = random_case(8, 2, 3, 2);
        v[4].iter_mut().for_each(|c| *c = 0.0);
        v[5].iter_mut().for_each(|s| *s = 0.0);
        let inp = inputs(&v, dims, ZohMode::Exact);
        let (y, ck) = inp.forward();
        assert!(y.iter().all(|&v| v == 0.0));
        let g = inp.backward(&ck, &[1.0; 16]);
        assert!(g.u.iter().all(|&v| v == 0.0));
    }
}
