use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Covariates;
use crate::error::{Error, Result};

/// Weighted least-squares input: design with a leading column of ones,
/// targets, and strictly positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedRegressionProblem {
    design: DMatrix<f64>,
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedRegressionProblem {
    pub fn new(x: &Covariates, targets: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        Self::from_design(x.design(), targets, weights)
    }

    pub fn from_design(design: DMatrix<f64>, targets: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = design.nrows();
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
        if n == 0 || design.ncols() == 0 {
            return Err(Error::InvalidInput("empty regression problem".into()));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "weight {i} = {} is not positive and finite",
                weights[i]
            )));
        }
        if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
            return Err(Error::InvalidInput(format!("target {i} is not finite")));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "design contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            design,
            targets,
            weights,
        })
    }

    pub fn n(&self) -> usize {
        self.targets.len()
    }

    /// Number of columns including the intercept.
    pub fn ncols(&self) -> usize {
        self.design.ncols()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weights rescaled to mean one.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let mean = self.weights.iter().sum::<f64>() / self.n() as f64;
        self.weights.iter().map(|w| w / mean).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            design: self.design.select_rows(rows),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
            weights: rows.iter().map(|&i| self.weights[i]).collect(),
        }
    }

    /// `(1/n) sum w_i (t_i - x_i' beta)^2` with the raw weights.
    pub fn weighted_risk(&self, beta: &[f64]) -> f64 {
        let b = DVector::from_column_slice(beta);
        let fitted = &self.design * b;
        self.targets
            .iter()
            .zip(&self.weights)
            .zip(fitted.iter())
            .map(|((t, w), f)| w * (t - f) * (t - f))
            .sum::<f64>()
            / self.n() as f64
    }
}

/// Linear coefficients, intercept first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub beta: Vec<f64>,
}

impl LinearFit {
    pub fn intercept(&self) -> f64 {
        self.beta[0]
    }

    pub fn slopes(&self) -> &[f64] {
        &self.beta[1..]
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.beta[0]
            + self.beta[1..]
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }
}

/// Weighted (ridge-)least squares.
///
/// Minimizes `(1/n) sum w_i (t_i - x_i' beta)^2 + ridge * |beta_{-0}|^2` with the
/// weights rescaled to mean one, so a common factor on the weights has no effect.
/// The intercept is never penalized.
pub fn solve_wls(problem: &WeightedRegressionProblem, ridge: f64) -> Result<LinearFit> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "ridge must be finite and >= 0, got {ridge}"
        )));
    }
    let n = problem.n();
    let k = problem.ncols();
    if ridge == 0.0 && n < k {
        return Err(Error::RankDeficient(format!(
            "{n} rows for {k} coefficients"
        )));
    }
    let w = problem.normalized_weights();
    let x = problem.design();
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for (i, (&wi, &yi)) in w.iter().zip(problem.targets.iter()).enumerate() {
        let row = x.row(i);
        for a in 0..k {
            let xa = wi * row[a];
            rhs[a] += xa * yi;
            for b in a..k {
                gram[(a, b)] += xa * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    for j in 1..k {
        gram[(j, j)] += n as f64 * ridge;
    }
    let scale = (0..k).map(|j| gram[(j, j)]).fold(0.0, f64::max);
    let chol = gram.clone().cholesky().ok_or_else(|| {
        Error::RankDeficient("weighted normal equations are not positive definite".into())
    })?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d * d)
        .fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-12 * scale {
        return Err(Error::RankDeficient(format!(
            "pivot {min_pivot:e} is negligible relative to {scale:e}"
        )));
    }
    let beta = chol.solve(&rhs);
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numerical("non-finite least-squares solution".into()));
    }
    Ok(LinearFit {
        beta: beta.iter().copied().collect(),
    })
}
