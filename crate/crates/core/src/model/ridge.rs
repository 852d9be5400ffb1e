use nalgebra::{DMatrix, DVector};

use super::train::TrainingSet;
use super::ModelError;

pub const DEFAULT_ALPHAS: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

/// Linear model `y = x·β + b` with an L2 penalty on `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub alpha: f64,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

/// Ridge coefficients for centred data. Uses the dual system when there are
/// fewer rows than columns; falls back to an SVD pseudo-inverse when the
/// regularized system is not numerically positive definite.
fn solve_centred(x: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> DVector<f64> {
    let (n, p) = x.shape();
    if n < p {
        let gram = x * x.transpose() + DMatrix::identity(n, n) * alpha;
        let dual = match gram.clone().cholesky() {
            Some(c) => c.solve(y),
            None => pinv_solve(gram, y),
        };
        x.transpose() * dual
    } else {
        let gram = x.transpose() * x + DMatrix::identity(p, p) * alpha;
        let rhs = x.transpose() * y;
        match gram.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => pinv_solve(gram, &rhs),
        }
    }
}

fn pinv_solve(a: DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let eps = 1e-12 * a.norm().max(1.0);
    a.svd(true, true).solve(b, eps).expect("SVD computed with both factors")
}

impl RidgeModel {
    /// Closed-form fit on `[n, dim]` row-major features.
    pub fn fit(features: &[f64], dim: usize, targets: &[f64], alpha: f64) -> Result<Self, ModelError> {
        let n = targets.len();
        if n == 0 || features.len() != n * dim {
            return Err(ModelError::EmptyData("ridge needs aligned, nonempty features and targets".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(ModelError::Config("ridge alpha must be positive".into()));
        }
        let x = DMatrix::from_row_slice(n, dim, features);
        let x_mean: Vec<f64> = (0..dim).map(|j| x.column(j).mean()).collect();
        let y_mean = targets.iter().sum::<f64>() / n as f64;
        let xc = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - x_mean[j]);
        let yc = DVector::from_iterator(n, targets.iter().map(|v| v - y_mean));
        let beta = solve_centred(&xc, &yc, alpha);
        let intercept = y_mean - beta.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
        Ok(Self { alpha, coefficients: beta.iter().copied().collect(), intercept })
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
    }

    pub fn predict(&self, features: &[f64]) -> Vec<f64> {
        features.chunks(self.coefficients.len()).map(|r| self.predict_row(r)).collect()
    }
}

/// Chooses α on a seeded holdout by validation MSE (earlier α wins ties),
/// then refits on all rows.
pub fn train_ridge(data: &TrainingSet, alphas: &[f64], validation_fraction: f64, seed: u64) -> Result<RidgeModel, ModelError> {
    if alphas.is_empty() {
        return Err(ModelError::Config("empty ridge alpha grid".into()));
    }
    let dim = data.dims.seats + crate::treatment::TREATMENT_DIM;
    let features = data.concat_features();
    let (fit, val) = data.holdout(validation_fraction, seed)?;
    let rows = |idx: &[usize]| idx.iter().flat_map(|&i| features[i * dim..(i + 1) * dim].iter().copied()).collect::<Vec<_>>();
    let ys = |idx: &[usize]| idx.iter().map(|&i| data.targets()[i]).collect::<Vec<_>>();
    let (fx, fy, vx, vy) = (rows(&fit), ys(&fit), rows(&val), ys(&val));
    let mut best = (f64::INFINITY, alphas[0]);
    for &alpha in alphas {
        let m = RidgeModel::fit(&fx, dim, &fy, alpha)?;
        let mse = m.predict(&vx).iter().zip(&vy).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / vy.len() as f64;
        if mse < best.0 {
            best = (mse, alpha);
        }
    }
    RidgeModel::fit(&features, dim, data.targets(), best.1)
}
