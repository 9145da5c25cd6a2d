//! Synthetic PDE datasets, normalization and the LDST file format.
//!
//! LDST layout (little-endian): `b"LDST"`, version `u32 = 1`, sample count
//! `u64`, points `u64`, train count `u64` (size of the split the statistics
//! came from), grid rows `u32`, grid cols `u32` (both 0 for unstructured
//! data), then LTNS blobs: inputs, targets, coords, input mean, input std,
//! target mean, target std.

pub mod darcy;
pub mod seq1d;

use std::path::Path;

use thiserror::Error;

use crate::tensor::ltns::{decode_ltns, encode_ltns, ByteReader, FormatError};
use crate::tensor::{Tensor, TensorError};

pub use darcy::{gen_coeff_field, gen_darcy_samples, grid_coords, solve_darcy, DarcyOperator, DarcySample, DarcySolution};
pub use seq1d::{gen_seq1d, Seq1dConfig, Seq1dKind};

pub const LDST_MAGIC: &[u8; 4] = b"LDST";
pub const LDST_VERSION: u32 = 1;
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("conjugate gradients did not converge in {iterations} iterations (relative residual {residual:.3e}); regenerate the field")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Per-channel mean and standard deviation of a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
    pub n_train: usize,
}

fn channel_stats(t: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let c = t.last_dim();
    let rows = t.len() / c.max(1);
    let mut mean = vec![0.0; c];
    for row in t.data().chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; c];
    for row in t.data().chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    (mean, var.into_iter().map(|s| (s / rows as f64).sqrt()).collect())
}

fn affine(t: &Tensor<f64>, mean: &[f64], std: &[f64], forward: bool) -> Result<Tensor<f64>, TensorError> {
    if t.last_dim() != mean.len() {
        return Err(TensorError::Contract {
            op: "normalize",
            msg: format!("tensor has {} channels, statistics have {}", t.last_dim(), mean.len()),
        });
    }
    let c = mean.len();
    let mut out = t.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = if forward { (*v - m) / (s + NORM_EPS) } else { *v * (s + NORM_EPS) + m };
        }
    }
    Ok(out)
}

impl NormStats {
    pub fn from_train(inputs: &Tensor<f64>, targets: &Tensor<f64>) -> Result<Self, TensorError> {
        if inputs.rank() != 3 || targets.rank() != 3 || inputs.shape()[0] != targets.shape()[0] {
            return Err(TensorError::Contract {
                op: "normalize",
                msg: format!("expected [n, N, c] inputs and targets, got {:?} and {:?}", inputs.shape(), targets.shape()),
            });
        }
        let (in_mean, in_std) = channel_stats(inputs);
        let (out_mean, out_std) = channel_stats(targets);
        Ok(NormStats {
            in_mean,
            in_std,
            out_mean,
            out_std,
            n_train: inputs.shape()[0],
        })
    }

    pub fn normalize_inputs(&self, x: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        affine(x, &self.in_mean, &self.in_std, true)
    }

    pub fn normalize_targets(&self, y: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        affine(y, &self.out_mean, &self.out_std, true)
    }

    pub fn denormalize_targets(&self, y: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        affine(y, &self.out_mean, &self.out_std, false)
    }
}

/// One split of a dataset in raw (unnormalized) units.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor<f64>,
    targets: Tensor<f64>,
    coords: Tensor<f64>,
    grid: Option<(usize, usize)>,
    stats: NormStats,
}

impl Dataset {
    pub fn new(
        inputs: Tensor<f64>,
        targets: Tensor<f64>,
        coords: Tensor<f64>,
        grid: Option<(usize, usize)>,
        stats: NormStats,
    ) -> Result<Self, DataError> {
        let bad = |msg: String| Err(DataError::Contract(msg));
        if inputs.rank() != 3 || targets.rank() != 3 || coords.rank() != 2 {
            return bad(format!(
                "expected inputs [n,N,d_a], targets [n,N,d_u], coords [N,d_c]; got {:?}, {:?}, {:?}",
                inputs.shape(),
                targets.shape(),
                coords.shape()
            ));
        }
        if inputs.shape()[..2] != targets.shape()[..2] || inputs.shape()[1] != coords.shape()[0] {
            return bad(format!(
                "sample/point counts disagree: {:?}, {:?}, {:?}",
                inputs.shape(),
                targets.shape(),
                coords.shape()
            ));
        }
        if let Some((h, w)) = grid {
            if h * w != inputs.shape()[1] {
                return bad(format!("grid {h}x{w} does not cover {} points", inputs.shape()[1]));
            }
        }
        if stats.in_mean.len() != inputs.shape()[2] || stats.out_mean.len() != targets.shape()[2] {
            return bad("statistics do not match channel counts".into());
        }
        Ok(Dataset {
            inputs,
            targets,
            coords,
            grid,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.targets.shape()[2]
    }

    pub fn coord_channels(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn inputs(&self) -> &Tensor<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Tensor<f64> {
        &self.targets
    }

    pub fn coords(&self) -> &Tensor<f64> {
        &self.coords
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn normalized_inputs(&self) -> Result<Tensor<f64>, TensorError> {
        self.stats.normalize_inputs(&self.inputs)
    }

    pub fn normalized_targets(&self) -> Result<Tensor<f64>, TensorError> {
        self.stats.normalize_targets(&self.targets)
    }

    /// Keeps the first `n` samples.
    pub fn truncated(&self, n: usize) -> Result<Self, DataError> {
        let n = n.min(self.len());
        let take = |t: &Tensor<f64>| {
            let per = t.len() / self.len().max(1);
            let mut shape = t.shape().to_vec();
            shape[0] = n;
            Tensor::new(&shape, t.data()[..n * per].to_vec())
        };
        Dataset::new(take(&self.inputs)?, take(&self.targets)?, self.coords.clone(), self.grid, self.stats.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LDST_MAGIC);
        out.extend_from_slice(&LDST_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.points() as u64).to_le_bytes());
        out.extend_from_slice(&(self.stats.n_train as u64).to_le_bytes());
        let (h, w) = self.grid.unwrap_or((0, 0));
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        for t in [&self.inputs, &self.targets, &self.coords] {
            encode_ltns(t, &mut out);
        }
        for v in [&self.stats.in_mean, &self.stats.in_std, &self.stats.out_mean, &self.stats.out_std] {
            encode_ltns(&Tensor::new(&[v.len()], v.clone()).unwrap(), &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = ByteReader::new(bytes);
        r.magic(LDST_MAGIC)?;
        r.version(LDST_VERSION)?;
        let n = r.u64()? as usize;
        let points = r.u64()? as usize;
        let n_train = r.u64()? as usize;
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        let mut blob = |what: &str, check: &dyn Fn(&[usize]) -> bool| -> Result<Tensor<f64>, DataError> {
            let at = r.offset();
            let t = decode_ltns::<f64>(&mut r)?;
            if !check(t.shape()) {
                return Err(FormatError::Invalid {
                    offset: at,
                    msg: format!("{what} has shape {:?}, inconsistent with header ({n} samples, {points} points)", t.shape()),
                }
                .into());
            }
            Ok(t)
        };
        let inputs = blob("inputs", &|s| s.len() == 3 && s[0] == n && s[1] == points)?;
        let targets = blob("targets", &|s| s.len() == 3 && s[0] == n && s[1] == points)?;
        let coords = blob("coords", &|s| s.len() == 2 && s[0] == points)?;
        let mut vec = |what: &str, len: usize| blob(what, &|s| s == [len]).map(|t| t.into_data());
        let in_mean = vec("input mean", inputs.shape()[2])?;
        let in_std = vec("input std", inputs.shape()[2])?;
        let out_mean = vec("target mean", targets.shape()[2])?;
        let out_std = vec("target std", targets.shape()[2])?;
        if r.remaining() != 0 {
            return Err(r.invalid("trailing bytes").into());
        }
        let grid = if h == 0 && w == 0 { None } else { Some((h, w)) };
        Dataset::new(
            inputs,
            targets,
            coords,
            grid,
            NormStats {
                in_mean,
                in_std,
                out_mean,
                out_std,
                n_train,
            },
        )
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, ds.to_bytes()).map_err(FormatError::Io)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(FormatError::Io)?;
    Dataset::from_bytes(&bytes)
}

/// Darcy train/test splits on an `h × w` grid. Input channel is the
/// coefficient, target the pressure; coordinates ride alongside.
pub fn gen_darcy(h: usize, w: usize, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let split = |start: usize, count: usize| -> Result<(Tensor<f64>, Tensor<f64>), DataError> {
        let samples = gen_darcy_samples(h, w, seed, start, count)?;
        let (mut x, mut y) = (Vec::with_capacity(count * h * w), Vec::with_capacity(count * h * w));
        for s in samples {
            x.extend_from_slice(s.a.data());
            y.extend_from_slice(s.u.data());
        }
        Ok((Tensor::new(&[count, h * w, 1], x)?, Tensor::new(&[count, h * w, 1], y)?))
    };
    let (xtr, ytr) = split(0, n_train)?;
    let (xte, yte) = split(n_train, n_test)?;
    let stats = NormStats::from_train(&xtr, &ytr)?;
    let coords = grid_coords(h, w);
    Ok((
        Dataset::new(xtr, ytr, coords.clone(), Some((h, w)), stats.clone())?,
        Dataset::new(xte, yte, coords, Some((h, w)), stats)?,
    ))
}
