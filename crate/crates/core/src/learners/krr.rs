//! Weighted kernel ridge regression with a Gaussian kernel and an unpenalized
//! intercept.
//!
//! Minimizes `(1/n) sum w_i (t_i - K_i' beta - beta0)^2 + lambda * beta' K beta`.
//! Weights are rescaled to mean one first. Setting the gradient to zero gives
//! the symmetric bordered system
//!
//! ```text
//! [ K + n lambda W^-1   1 ] [ beta  ]   [ t ]
//! [ 1'                  0 ] [ beta0 ] = [ 0 ]
//! ```
//!
//! which is solved through a Cholesky factor of the leading block and its
//! Schur complement.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Covariates;
use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_STEPS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise Euclidean distance of the training inputs.
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFit {
    pub anchors: Covariates,
    pub dual_beta: Vec<f64>,
    pub intercept: f64,
    pub bandwidth: f64,
}

impl KernelFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .anchors
                .rows()
                .zip(&self.dual_beta)
                .map(|(anchor, b)| b * gaussian_kernel(x, anchor, self.bandwidth))
                .sum::<f64>()
    }
}

pub fn gaussian_kernel(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
    (-d2 / (2.0 * bandwidth * bandwidth)).exp()
}

pub fn kernel_matrix(x: &Covariates, bandwidth: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let mut k = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = gaussian_kernel(x.row(i), x.row(j), bandwidth);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Median pairwise Euclidean distance.
pub fn median_heuristic(x: &Covariates) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(
            "median heuristic needs at least two points".into(),
        ));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.push(s.sqrt());
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if m > 0.0 {
        Ok(m)
    } else {
        Err(Error::InvalidInput(
            "median pairwise distance is zero; set the bandwidth explicitly".into(),
        ))
    }
}

pub fn resolve_bandwidth(x: &Covariates, bandwidth: Bandwidth) -> Result<f64> {
    match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => Ok(h),
        Bandwidth::Fixed(h) => Err(Error::InvalidInput(format!(
            "bandwidth must be positive, got {h}"
        ))),
        Bandwidth::Median => median_heuristic(x),
    }
}

fn check_inputs(x: &Covariates, targets: &[f64], weights: &[f64], lambda: f64) -> Result<()> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(
            "kernel ridge needs at least two points".into(),
        ));
    }
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: weights.len(),
        });
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "kernel ridge penalty must be positive, got {lambda}"
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidInput(
            "weights must be positive and finite".into(),
        ));
    }
    Ok(())
}

/// Solve with a precomputed kernel matrix.
pub fn fit_weighted_krr_with_kernel(
    x: &Covariates,
    kernel: &DMatrix<f64>,
    targets: &[f64],
    weights: &[f64],
    lambda: f64,
    bandwidth: f64,
) -> Result<KernelFit> {
    check_inputs(x, targets, weights, lambda)?;
    let n = x.nrows();
    let mean_w = weights.iter().sum::<f64>() / n as f64;
    let mut system = kernel.clone();
    for i in 0..n {
        system[(i, i)] += n as f64 * lambda * mean_w / weights[i];
    }
    let mut jitter = 0.0;
    let mut chol = None;
    for step in 0..=JITTER_STEPS {
        let mut m = system.clone();
        if jitter > 0.0 {
            for i in 0..n {
                m[(i, i)] += jitter;
            }
        }
        if let Some(c) = m.cholesky() {
            chol = Some(c);
            break;
        }
        jitter = JITTER_START * 100f64.powi(step as i32);
    }
    let chol = chol.ok_or_else(|| {
        Error::Numerical("kernel system not positive definite after jitter".into())
    })?;
    let t = DVector::from_column_slice(targets);
    let ones = DVector::from_element(n, 1.0);
    let a = chol.solve(&t);
    let b = chol.solve(&ones);
    let denom = b.sum();
    if !(denom.is_finite() && denom > 0.0) {
        return Err(Error::Numerical(
            "degenerate Schur complement in kernel system".into(),
        ));
    }
    let intercept = a.sum() / denom;
    let dual = a - b * intercept;
    if dual.iter().any(|v| !v.is_finite()) || !intercept.is_finite() {
        return Err(Error::Numerical("non-finite kernel ridge solution".into()));
    }
    Ok(KernelFit {
        anchors: x.clone(),
        dual_beta: dual.iter().copied().collect(),
        intercept,
        bandwidth,
    })
}

pub fn fit_weighted_krr(
    x: &Covariates,
    targets: &[f64],
    weights: &[f64],
    lambda: f64,
    bandwidth: Bandwidth,
) -> Result<KernelFit> {
    check_inputs(x, targets, weights, lambda)?;
    let h = resolve_bandwidth(x, bandwidth)?;
    let k = kernel_matrix(x, h);
    fit_weighted_krr_with_kernel(x, &k, targets, weights, lambda, h)
}

/// Objective value of a fit on its own training data, with mean-one weights.
pub fn krr_objective(fit: &KernelFit, targets: &[f64], weights: &[f64], lambda: f64) -> f64 {
    let n = targets.len() as f64;
    let mean_w = weights.iter().sum::<f64>() / n;
    let k = kernel_matrix(&fit.anchors, fit.bandwidth);
    let beta = DVector::from_column_slice(&fit.dual_beta);
    let kb = &k * &beta;
    let loss: f64 = (0..targets.len())
        .map(|i| weights[i] / mean_w * (targets[i] - kb[i] - fit.intercept).powi(2))
        .sum::<f64>()
        / n;
    loss + lambda * beta.dot(&kb)
}

/// Cross-validated penalty choice over `grid` (fold of row `i` is `i mod folds`);
/// held-out loss is the weighted squared error. Refits on all rows.
pub fn fit_krr_cv(
    x: &Covariates,
    targets: &[f64],
    weights: &[f64],
    grid: &[f64],
    folds: usize,
    bandwidth: Bandwidth,
) -> Result<(KernelFit, f64)> {
    if grid.is_empty() {
        return Err(Error::InvalidInput(
            "empty kernel ridge penalty grid".into(),
        ));
    }
    let n = x.nrows();
    let folds = folds.max(2);
    if n < 2 * folds {
        return Err(Error::InvalidInput(format!(
            "{n} rows are too few for {folds}-fold CV"
        )));
    }
    let h = resolve_bandwidth(x, bandwidth)?;
    let full_kernel = kernel_matrix(x, h);
    let mut errors = vec![0.0; grid.len()];
    for fold in 0..folds {
        let train: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
        let test: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
        let xt = x.select_rows(&train);
        let kt = full_kernel.select_rows(&train).select_columns(&train);
        let tt: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
        let wt: Vec<f64> = train.iter().map(|&i| weights[i]).collect();
        let cross = full_kernel.select_rows(&test).select_columns(&train);
        for (k, &lambda) in grid.iter().enumerate() {
            let fit = fit_weighted_krr_with_kernel(&xt, &kt, &tt, &wt, lambda, h)?;
            let pred = &cross * DVector::from_column_slice(&fit.dual_beta);
            errors[k] += test
                .iter()
                .enumerate()
                .map(|(r, &i)| weights[i] * (targets[i] - pred[r] - fit.intercept).powi(2))
                .sum::<f64>();
        }
    }
    let best = errors
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let lambda = grid[best];
    Ok((
        fit_weighted_krr_with_kernel(x, &full_kernel, targets, weights, lambda, h)?,
        lambda,
    ))
}
