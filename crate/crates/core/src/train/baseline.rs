//! Pointwise ridge regression: each output value is a linear function of
//! the input channels and coordinates at the same point.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::tensor::Tensor;

use super::{loss, EvalReport, TrainError};

#[derive(Clone, Debug)]
pub struct RidgeBaseline {
    /// `[features × d_u]`, features = inputs, coords, bias.
    weights: DMatrix<f64>,
}

fn features(ds: &Dataset, sample: usize, point: usize, out: &mut Vec<f64>) {
    out.clear();
    let (da, dc) = (ds.in_channels(), ds.coord_channels());
    let base = (sample * ds.points() + point) * da;
    out.extend_from_slice(&ds.inputs().data()[base..base + da]);
    out.extend_from_slice(&ds.coords().data()[point * dc..(point + 1) * dc]);
    out.push(1.0);
}

impl RidgeBaseline {
    pub fn fit(ds: &Dataset, lambda: f64) -> Result<Self, TrainError> {
        let nf = ds.in_channels() + ds.coord_channels() + 1;
        let du = ds.out_channels();
        let mut xtx = DMatrix::<f64>::zeros(nf, nf);
        let mut xty = DMatrix::<f64>::zeros(nf, du);
        let mut f = Vec::with_capacity(nf);
        for s in 0..ds.len() {
            for p in 0..ds.points() {
                features(ds, s, p, &mut f);
                let fv = DVector::from_column_slice(&f);
                xtx += &fv * fv.transpose();
                let base = (s * ds.points() + p) * du;
                for (c, &y) in ds.targets().data()[base..base + du].iter().enumerate() {
                    for (j, &fj) in f.iter().enumerate() {
                        xty[(j, c)] += fj * y;
                    }
                }
            }
        }
        for j in 0..nf {
            xtx[(j, j)] += lambda;
        }
        let chol = xtx
            .cholesky()
            .ok_or_else(|| TrainError::Baseline("normal equations are not positive definite".into()))?;
        Ok(RidgeBaseline { weights: chol.solve(&xty) })
    }

    pub fn predict(&self, ds: &Dataset) -> Tensor<f64> {
        let du = ds.out_channels();
        let mut out = Vec::with_capacity(ds.len() * ds.points() * du);
        let mut f = Vec::new();
        for s in 0..ds.len() {
            for p in 0..ds.points() {
                features(ds, s, p, &mut f);
                for c in 0..du {
                    out.push(f.iter().enumerate().map(|(j, v)| v * self.weights[(j, c)]).sum());
                }
            }
        }
        Tensor::new(&[ds.len(), ds.points(), du], out).unwrap()
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<EvalReport, TrainError> {
        let per_sample = loss::rel_l2_per_sample(&self.predict(ds), ds.targets())?;
        Ok(EvalReport::from_samples(per_sample))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, NormStats};

    #[test]
    fn recovers_a_linear_map() {
        let (n, pts) = (3, 10);
        let x = Tensor::randn(&[n, pts, 1], &mut crate::Rng::new(2, 0));
        let coords = Tensor::new(&[pts, 1], (0..pts).map(|i| i as f64 / pts as f64).collect()).unwrap();
        let mut y = Vec::new();
        for s in 0..n {
            for p in 0..pts {
                y.push(2.0 * x.data()[s * pts + p] - 0.5 * coords.data()[p] + 0.75);
            }
        }
        let y = Tensor::new(&[n, pts, 1], y).unwrap();
        let stats = NormStats::from_train(&x, &y).unwrap();
        let ds = Dataset::new(x, y, coords, None, stats).unwrap();
        let r = RidgeBaseline::fit(&ds, 1e-12).unwrap();
        assert!(r.evaluate(&ds).unwrap().mean < 1e-9);
    }
}
