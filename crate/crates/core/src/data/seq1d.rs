//! Periodic 1-D sequence tasks rolled out with explicit finite differences.

use std::fmt;
use std::str::FromStr;

use crate::tensor::{Rng, Tensor};

use super::{DataError, Dataset, NormStats};

/// Fourier modes in the random initial condition.
pub const INIT_MODES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Seq1dKind {
    Diffusion,
    Advection,
    /// Two target channels: the state advected forward and backward.
    AdvectionTwoWay,
}

impl Seq1dKind {
    pub fn name(self) -> &'static str {
        match self {
            Seq1dKind::Diffusion => "diffusion",
            Seq1dKind::Advection => "advection",
            Seq1dKind::AdvectionTwoWay => "advection2",
        }
    }

    pub fn out_channels(self) -> usize {
        match self {
            Seq1dKind::AdvectionTwoWay => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Seq1dKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Seq1dKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "diffusion" => Ok(Seq1dKind::Diffusion),
            "advection" => Ok(Seq1dKind::Advection),
            "advection2" => Ok(Seq1dKind::AdvectionTwoWay),
            _ => Err(format!("unknown seq1d kind `{s}` (expected diffusion, advection, advection2)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Seq1dConfig {
    pub kind: Seq1dKind,
    pub points: usize,
    pub steps: usize,
    /// Diffusion number `ν Δt / Δx²` or Courant number `c Δt / Δx`.
    pub coef: f64,
}

impl Seq1dConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.points < 2 {
            return Err(DataError::Contract(format!("need at least 2 points, got {}", self.points)));
        }
        match self.kind {
            Seq1dKind::Diffusion if !(self.coef > 0.0 && self.coef <= 0.5) => Err(DataError::Contract(format!(
                "diffusion number {} violates stability (0 < ν Δt/Δx² ≤ 1/2)",
                self.coef
            ))),
            Seq1dKind::Advection | Seq1dKind::AdvectionTwoWay if !(self.coef > 0.0 && self.coef <= 1.0) => Err(
                DataError::Contract(format!("CFL number {} violates stability (0 < c ≤ 1)", self.coef)),
            ),
            _ => Ok(()),
        }
    }
}

/// One explicit step of `u_t = ν u_xx` with periodic wrap.
pub fn diffusion_step(u: &[f64], r: f64) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|i| u[i] + r * (u[(i + 1) % n] - 2.0 * u[i] + u[(i + n - 1) % n]))
        .collect()
}

/// One first-order upwind step of `u_t + c u_x = 0`; negative `c` moves left.
pub fn advection_step(u: &[f64], c: f64) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|i| {
            // Convex-combination form so unit CFL copies values exactly.
            let up = if c >= 0.0 { u[(i + n - 1) % n] } else { u[(i + 1) % n] };
            (1.0 - c.abs()) * u[i] + c.abs() * up
        })
        .collect()
}

fn rollout(u: &[f64], steps: usize, step: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    (0..steps).fold(u.to_vec(), |s, _| step(&s))
}

/// Random smooth periodic state: a short Fourier series with `1/k` decay.
pub fn initial_state(points: usize, rng: &mut Rng) -> Vec<f64> {
    let coeffs: Vec<(f64, f64)> = (0..INIT_MODES).map(|_| (rng.normal(), rng.normal())).collect();
    (0..points)
        .map(|i| {
            let x = i as f64 / points as f64;
            coeffs
                .iter()
                .enumerate()
                .map(|(k, &(a, b))| {
                    let w = std::f64::consts::TAU * (k + 1) as f64 * x;
                    (a * w.cos() + b * w.sin()) / (k + 1) as f64
                })
                .sum::<f64>()
        })
        .collect()
}

/// Input state and target channels for sample `index`, interleaved
/// `[points × channels]`.
pub fn gen_seq1d_sample(cfg: &Seq1dConfig, seed: u64, index: u64) -> Result<(Vec<f64>, Vec<f64>), DataError> {
    cfg.validate()?;
    let mut rng = Rng::new(seed, index);
    let u0 = initial_state(cfg.points, &mut rng);
    let target = match cfg.kind {
        Seq1dKind::Diffusion => rollout(&u0, cfg.steps, |s| diffusion_step(s, cfg.coef)),
        Seq1dKind::Advection => rollout(&u0, cfg.steps, |s| advection_step(s, cfg.coef)),
        Seq1dKind::AdvectionTwoWay => {
            let fwd = rollout(&u0, cfg.steps, |s| advection_step(s, cfg.coef));
            let bwd = rollout(&u0, cfg.steps, |s| advection_step(s, -cfg.coef));
            fwd.into_iter().zip(bwd).flat_map(|(a, b)| [a, b]).collect()
        }
    };
    Ok((u0, target))
}

/// Train and test splits; test samples continue the stream numbering after
/// the training samples. Both carry training-split statistics.
pub fn gen_seq1d(cfg: &Seq1dConfig, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    cfg.validate()?;
    let d_u = cfg.kind.out_channels();
    let build = |range: std::ops::Range<usize>| -> Result<(Tensor<f64>, Tensor<f64>), DataError> {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for i in range.clone() {
            let (a, b) = gen_seq1d_sample(cfg, seed, i as u64)?;
            x.extend(a);
            y.extend(b);
        }
        let n = range.len();
        Ok((Tensor::new(&[n, cfg.points, 1], x)?, Tensor::new(&[n, cfg.points, d_u], y)?))
    };
    let (xtr, ytr) = build(0..n_train)?;
    let (xte, yte) = build(n_train..n_train + n_test)?;
    let coords = Tensor::new(
        &[cfg.points, 1],
        (0..cfg.points).map(|i| i as f64 / cfg.points as f64).collect(),
    )?;
    let stats = NormStats::from_train(&xtr, &ytr)?;
    let grid = Some((1, cfg.points));
    Ok((
        Dataset::new(xtr, ytr, coords.clone(), grid, stats.clone())?,
        Dataset::new(xte, yte, coords, grid, stats)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diffusion_conserves_mass_and_smooths() {
        let mut u = vec![0.0; 64];
        u[20] = 1.0;
        let mut max = 1.0;
        for _ in 0..200 {
            u = diffusion_step(&u, 0.4);
            let m = u.iter().cloned().fold(f64::MIN, f64::max);
            assert!(m <= max);
            max = m;
            assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(max < 0.1);
    }

    #[test]
    fn unit_cfl_is_exact_shift() {
        let mut rng = Rng::new(1, 0);
        let u = initial_state(32, &mut rng);
        let right = advection_step(&u, 1.0);
        let left = advection_step(&u, -1.0);
        for i in 0..32 {
            assert_eq!(right[(i + 1) % 32], u[i]);
            assert_eq!(left[i], u[(i + 1) % 32]);
        }
    }

    #[test]
    fn stability_contract() {
        let mut cfg = Seq1dConfig {
            kind: Seq1dKind::Diffusion,
            points: 16,
            steps: 1,
            coef: 0.51,
        };
        assert!(matches!(cfg.validate(), Err(DataError::Contract(_))));
        cfg.coef = 0.5;
        assert!(cfg.validate().is_ok());
        cfg.kind = Seq1dKind::Advection;
        cfg.coef = 1.01;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn two_way_targets_are_shifts() {
        let cfg = Seq1dConfig {
            kind: Seq1dKind::AdvectionTwoWay,
            points: 32,
            steps: 3,
            coef: 1.0,
        };
        let (u, y) = gen_seq1d_sample(&cfg, 5, 2).unwrap();
        for i in 0..32 {
            assert_eq!(y[2 * ((i + 3) % 32)], u[i]);
            assert_eq!(y[2 * i + 1], u[(i + 3) % 32]);
        }
        let (tr, te) = gen_seq1d(&cfg, 4, 2, 5).unwrap();
        assert_eq!(tr.targets().shape(), &[4, 32, 2]);
        assert_eq!(te.inputs().shape(), &[2, 32, 1]);
        assert_eq!(&te.inputs().data()[..32], gen_seq1d_sample(&cfg, 5, 4).unwrap().0.as_slice());
    }
}
