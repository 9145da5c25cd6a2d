//! Two-level porous media and the finite-volume Darcy solver used as ground
//! truth.

use rayon::prelude::*;

use crate::tensor::{Rng, Tensor};

use super::DataError;

pub const COEFF_LO: f64 = 4.0;
pub const COEFF_HI: f64 = 12.0;
pub const BLUR_PASSES: usize = 8;
pub const SOLVER_TOL: f64 = 1e-8;
pub const MIN_GRID: usize = 8;

/// Blurred white noise thresholded at its median into `{4, 12}`.
/// `stream` separates samples drawn from the same seed.
pub fn gen_coeff_field(h: usize, w: usize, seed: u64, stream: u64) -> Result<Tensor<f64>, DataError> {
    if h < MIN_GRID || w < MIN_GRID {
        return Err(DataError::Contract(format!("grid {h}x{w} is below the {MIN_GRID}x{MIN_GRID} minimum")));
    }
    let mut rng = Rng::new(seed, stream);
    let mut f: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
    let mut tmp = vec![0.0; h * w];
    for _ in 0..BLUR_PASSES {
        for r in 0..h {
            for c in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                    for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                        s += f[rr * w + cc];
                        n += 1.0;
                    }
                }
                tmp[r * w + c] = s / n;
            }
        }
        std::mem::swap(&mut f, &mut tmp);
    }
    let mut sorted = f.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 0 { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) } else { sorted[n / 2] };
    let a: Vec<f64> = f.iter().map(|&v| if v > median { COEFF_HI } else { COEFF_LO }).collect();
    Ok(Tensor::new(&[h, w], a)?)
}

/// Five-point finite-volume operator of `-∇·(a∇u)` on the interior of an
/// `h × w` node grid over `[0,1]²`, with `u = 0` on the boundary ring.
/// Face coefficients are harmonic means of the adjacent cell values.
#[derive(Clone, Debug)]
pub struct DarcyOperator {
    h: usize,
    w: usize,
    /// Per node: east and south face coupling, already divided by spacing².
    east: Vec<f64>,
    south: Vec<f64>,
    diag: Vec<f64>,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

impl DarcyOperator {
    pub fn new(a: &Tensor<f64>) -> Result<Self, DataError> {
        let &[h, w] = a.shape() else {
            return Err(DataError::Contract(format!("coefficient must be 2-D, got {:?}", a.shape())));
        };
        if h < 3 || w < 3 {
            return Err(DataError::Contract(format!("grid {h}x{w} has no interior")));
        }
        let av = a.data();
        if let Some(bad) = av.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(DataError::Contract(format!("coefficient must be positive, found {bad}")));
        }
        let idx2 = ((h - 1) as f64).powi(2);
        let idy2 = ((w - 1) as f64).powi(2);
        let (mut east, mut south) = (vec![0.0; h * w], vec![0.0; h * w]);
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if c + 1 < w {
                    east[i] = harmonic(av[i], av[i + 1]) * idy2;
                }
                if r + 1 < h {
                    south[i] = harmonic(av[i], av[i + w]) * idx2;
                }
            }
        }
        let mut diag = vec![0.0; h * w];
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                let i = r * w + c;
                diag[i] = east[i] + east[i - 1] + south[i] + south[i - w];
            }
        }
        Ok(DarcyOperator { h, w, east, south, diag })
    }

    fn interior(&self, i: usize) -> bool {
        let (r, c) = (i / self.w, i % self.w);
        r > 0 && c > 0 && r + 1 < self.h && c + 1 < self.w
    }

    /// `A·u` on interior nodes; boundary entries of the result are zero.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let w = self.w;
        for r in 1..self.h - 1 {
            for c in 1..w - 1 {
                let i = r * w + c;
                out[i] = self.diag[i] * u[i]
                    - self.east[i] * u[i + 1]
                    - self.east[i - 1] * u[i - 1]
                    - self.south[i] * u[i + w]
                    - self.south[i - w] * u[i - w];
            }
        }
        for (i, o) in out.iter_mut().enumerate() {
            if !self.interior(i) {
                *o = 0.0;
            }
        }
    }

    /// `‖A u - f‖₂ / ‖f‖₂` over interior nodes for constant forcing `beta`.
    pub fn relative_residual(&self, u: &[f64], beta: f64) -> f64 {
        let mut au = vec![0.0; u.len()];
        self.apply(u, &mut au);
        let (mut rr, mut ff) = (0.0, 0.0);
        for (i, v) in au.iter().enumerate() {
            if self.interior(i) {
                rr += (v - beta).powi(2);
                ff += beta * beta;
            }
        }
        (rr / ff).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct DarcySolution {
    pub u: Tensor<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `-∇·(a∇u) = beta` with homogeneous Dirichlet data by
/// Jacobi-preconditioned conjugate gradients.
pub fn solve_darcy(a: &Tensor<f64>, beta: f64) -> Result<DarcySolution, DataError> {
    let op = DarcyOperator::new(a)?;
    let n = op.h * op.w;
    let max_iter = 10 * n;
    let interior: Vec<bool> = (0..n).map(|i| op.interior(i)).collect();
    let mut u = vec![0.0; n];
    let mut r: Vec<f64> = interior.iter().map(|&b| if b { beta } else { 0.0 }).collect();
    let f_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let inv_diag: Vec<f64> = op.diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for it in 0..max_iter {
        let r_norm = dot(&r, &r).sqrt();
        // The recurrence residual can drift from the true one; confirm.
        if r_norm <= 0.5 * SOLVER_TOL * f_norm {
            let residual = op.relative_residual(&u, beta);
            if residual < SOLVER_TOL {
                return Ok(DarcySolution {
                    u: Tensor::new(&[op.h, op.w], u)?,
                    iterations: it,
                    residual,
                });
            }
            op.apply(&u, &mut ap);
            for i in 0..n {
                r[i] = if interior[i] { beta - ap[i] } else { 0.0 };
                z[i] = r[i] * inv_diag[i];
            }
            p.copy_from_slice(&z);
            rz = dot(&r, &z);
        }
        op.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let b = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + b * p[i];
        }
    }
    Err(DataError::NoConvergence {
        iterations: max_iter,
        residual: op.relative_residual(&u, beta),
    })
}

/// Node coordinates `(row, col)/(extent - 1)` in `[0,1]²`, row-major.
pub fn grid_coords(h: usize, w: usize) -> Tensor<f64> {
    let sr = 1.0 / (h.max(2) - 1) as f64;
    let sc = 1.0 / (w.max(2) - 1) as f64;
    let data = (0..h * w).flat_map(|i| [(i / w) as f64 * sr, (i % w) as f64 * sc]).collect();
    Tensor::new(&[h * w, 2], data).unwrap()
}

/// One generated pair: coefficient field and its solution, both `[h×w]`.
pub struct DarcySample {
    pub a: Tensor<f64>,
    pub u: Tensor<f64>,
    pub coords: Tensor<f64>,
    pub residual: f64,
}

/// Samples `start..start+count` of the stream family `seed`, generated in
/// parallel; output order and content do not depend on thread count.
pub fn gen_darcy_samples(h: usize, w: usize, seed: u64, start: usize, count: usize) -> Result<Vec<DarcySample>, DataError> {
    (start..start + count)
        .into_par_iter()
        .map(|i| {
            let a = gen_coeff_field(h, w, seed, i as u64)?;
            let sol = solve_darcy(&a, 1.0)?;
            Ok(DarcySample {
                a,
                u: sol.u,
                coords: grid_coords(h, w),
                residual: sol.residual,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_field_levels() {
        let a = gen_coeff_field(64, 64, 3, 0).unwrap();
        assert_eq!(a, gen_coeff_field(64, 64, 3, 0).unwrap());
        assert_ne!(a, gen_coeff_field(64, 64, 3, 1).unwrap());
        let hi = a.data().iter().filter(|&&v| v == COEFF_HI).count();
        let lo = a.data().iter().filter(|&&v| v == COEFF_LO).count();
        assert_eq!(hi + lo, 64 * 64);
        assert!((hi as f64 / 4096.0 - 0.5).abs() <= 0.02, "{hi}");
        assert!(gen_coeff_field(7, 7, 0, 0).is_err());
    }

    #[test]
    fn constant_medium_is_symmetric() {
        let a = Tensor::full(&[17, 17], 1.0);
        let sol = solve_darcy(&a, 1.0).unwrap();
        assert!(sol.residual < SOLVER_TOL);
        let u = sol.u.data();
        let n = 17;
        let mut asym: f64 = 0.0;
        for r in 0..n {
            for c in 0..n {
                let v = u[r * n + c];
                for s in [u[c * n + r], u[r * n + n - 1 - c], u[(n - 1 - r) * n + c], u[(n - 1 - c) * n + (n - 1 - r)]] {
                    asym = asym.max((v - s).abs());
                }
            }
        }
        assert!(asym < 1e-10, "{asym}");
        for i in 0..n {
            for b in [u[i], u[(n - 1) * n + i], u[i * n], u[i * n + n - 1]] {
                assert_eq!(b, 0.0);
            }
        }
        // Peak of -Δu = 1 on the unit square.
        assert!((u[8 * n + 8] - 0.07367).abs() < 1e-3, "{}", u[8 * n + 8]);
    }

    #[test]
    fn refinement_is_consistent() {
        let coarse = solve_darcy(&Tensor::full(&[17, 17], 1.0), 1.0).unwrap().u;
        let fine = solve_darcy(&Tensor::full(&[33, 33], 1.0), 1.0).unwrap().u;
        let (mut d, mut t) = (0.0, 0.0);
        for r in 0..17 {
            for c in 0..17 {
                let uc = coarse.data()[r * 17 + c];
                let uf = fine.data()[2 * r * 33 + 2 * c];
                d += (uc - uf).powi(2);
                t += uf * uf;
            }
        }
        assert!((d / t).sqrt() < 0.02);
    }

    #[test]
    fn generated_samples_meet_tolerance() {
        let samples = gen_darcy_samples(16, 16, 7, 0, 8).unwrap();
        for s in &samples {
            assert!(s.residual < SOLVER_TOL);
            let op = DarcyOperator::new(&s.a).unwrap();
            assert!(op.relative_residual(s.u.data(), 1.0) < SOLVER_TOL);
            assert!(s.u.data().iter().all(|&v| v >= 0.0));
        }
        let again = gen_darcy_samples(16, 16, 7, 3, 2).unwrap();
        assert_eq!(again[0].u, samples[3].u);
    }

    #[test]
    fn rejects_bad_coefficients() {
        let mut a = Tensor::full(&[8, 8], 1.0);
        a.data_mut()[9] = 0.0;
        assert!(solve_darcy(&a, 1.0).is_err());
    }
}
