//! Weighted LASSO by cyclic coordinate descent.
//!
//! Objective: `(1/n) sum w_i (t_i - x_i' beta)^2 + lambda * |beta_{-0}|_1` with the
//! raw weights, so scaling the weights by `c` is matched by scaling `lambda` by `c`.
//! Columns are centered and scaled internally; the penalty is carried over to the
//! original coefficient scale so the reported solution solves the objective above.

use serde::{Deserialize, Serialize};

use super::wls::{LinearFit, WeightedRegressionProblem};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 100_000;
pub const DEFAULT_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub max_iter: usize,
    /// Convergence threshold on the largest coefficient change in a sweep.
    pub tol: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

/// Cross-validation grid: `num_lambdas` log-spaced values from `lambda_max`
/// down `decades` decades, `folds`-fold weighted CV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoCvOptions {
    pub num_lambdas: usize,
    pub decades: f64,
    pub folds: usize,
}

impl Default for LassoCvOptions {
    fn default() -> Self {
        Self {
            num_lambdas: 50,
            decades: 2.0,
            folds: 5,
        }
    }
}

struct Standardized {
    /// Column-major centered and scaled slopes.
    columns: Vec<Vec<f64>>,
    means: Vec<f64>,
    scales: Vec<f64>,
    target_mean: f64,
    centered_targets: Vec<f64>,
}

fn standardize(problem: &WeightedRegressionProblem) -> Standardized {
    let n = problem.n();
    let w = problem.weights();
    let wsum: f64 = w.iter().sum();
    let t = problem.targets();
    let target_mean = t.iter().zip(w).map(|(t, w)| t * w).sum::<f64>() / wsum;
    let centered_targets = t.iter().map(|v| v - target_mean).collect();
    let design = problem.design();
    let p = problem.ncols() - 1;
    let mut columns = Vec::with_capacity(p);
    let mut means = Vec::with_capacity(p);
    let mut scales = Vec::with_capacity(p);
    for j in 1..=p {
        let col = design.column(j);
        let mean = col.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / wsum;
        let var = col
            .iter()
            .zip(w)
            .map(|(x, w)| w * (x - mean) * (x - mean))
            .sum::<f64>()
            / n as f64;
        let scale = var.sqrt();
        let std_col = if scale > 0.0 {
            col.iter().map(|x| (x - mean) / scale).collect()
        } else {
            vec![0.0; n]
        };
        columns.push(std_col);
        means.push(mean);
        scales.push(scale);
    }
    Standardized {
        columns,
        means,
        scales,
        target_mean,
        centered_targets,
    }
}

/// Smallest `lambda` at which every slope is exactly zero.
pub fn lambda_max(problem: &WeightedRegressionProblem) -> f64 {
    let s = standardize(problem);
    let n = problem.n() as f64;
    let w = problem.weights();
    s.columns
        .iter()
        .zip(&s.scales)
        .map(|(col, scale)| {
            let rho: f64 = col.iter().zip(&s.centered_targets).zip(w).map(|((c, t), w)| w * c * t).sum::<f64>() / n;
            2.0 * (rho * scale).abs()
        })
        .fold(0.0, f64::max)
        // one part in 1e12 absorbs rounding between this and the descent threshold
        * (1.0 + 1e-12)
}

fn soft_threshold(v: f64, k: f64) -> f64 {
    if v > k {
        v - k
    } else if v < -k {
        v + k
    } else {
        0.0
    }
}

fn to_original(s: &Standardized, gamma: &[f64]) -> LinearFit {
    let slopes: Vec<f64> = gamma
        .iter()
        .zip(&s.scales)
        .map(|(g, sc)| if *sc > 0.0 { g / sc } else { 0.0 })
        .collect();
    let intercept = s.target_mean - slopes.iter().zip(&s.means).map(|(b, m)| b * m).sum::<f64>();
    let mut beta = Vec::with_capacity(slopes.len() + 1);
    beta.push(intercept);
    beta.extend(slopes);
    LinearFit { beta }
}

fn coordinate_descent(
    problem: &WeightedRegressionProblem,
    s: &Standardized,
    lambda: f64,
    opts: &LassoOptions,
    warm: Option<&[f64]>,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<Vec<f64>> {
    let n = problem.n() as f64;
    let w = problem.weights();
    let p = s.columns.len();
    let mut gamma = warm.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p]);
    let mut resid = s.centered_targets.clone();
    for (j, g) in gamma.iter().enumerate() {
        if *g != 0.0 {
            for (r, c) in resid.iter_mut().zip(&s.columns[j]) {
                *r -= c * g;
            }
        }
    }
    let curvature: Vec<f64> = s
        .columns
        .iter()
        .map(|col| col.iter().zip(w).map(|(c, w)| w * c * c).sum::<f64>() / n)
        .collect();
    let objective = |resid: &[f64], gamma: &[f64]| -> f64 {
        resid.iter().zip(w).map(|(r, w)| w * r * r).sum::<f64>() / n
            + lambda
                * gamma
                    .iter()
                    .zip(&s.scales)
                    .map(|(g, sc)| if *sc > 0.0 { (g / sc).abs() } else { 0.0 })
                    .sum::<f64>()
    };
    if let Some(t) = trace.as_deref_mut() {
        t.push(objective(&resid, &gamma));
    }
    for _ in 0..opts.max_iter {
        let mut max_change = 0.0f64;
        for j in 0..p {
            if s.scales[j] == 0.0 || curvature[j] == 0.0 {
                continue;
            }
            let col = &s.columns[j];
            let old = gamma[j];
            let rho = col
                .iter()
                .zip(&resid)
                .zip(w)
                .map(|((c, r), w)| w * c * (r + c * old))
                .sum::<f64>()
                / n;
            let new = soft_threshold(rho, lambda / (2.0 * s.scales[j])) / curvature[j];
            if new != old {
                let delta = new - old;
                for (r, c) in resid.iter_mut().zip(col) {
                    *r -= c * delta;
                }
                gamma[j] = new;
                max_change = max_change.max((delta / s.scales[j]).abs());
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(objective(&resid, &gamma));
        }
        if max_change < opts.tol {
            return Ok(gamma);
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        last: to_original(s, &gamma).beta,
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "lasso penalty must be positive, got {lambda}"
        )))
    }
}

pub fn fit_weighted_lasso(problem: &WeightedRegressionProblem, lambda: f64) -> Result<LinearFit> {
    fit_weighted_lasso_with(problem, lambda, &LassoOptions::default())
}

pub fn fit_weighted_lasso_with(
    problem: &WeightedRegressionProblem,
    lambda: f64,
    opts: &LassoOptions,
) -> Result<LinearFit> {
    check_lambda(lambda)?;
    let s = standardize(problem);
    let gamma = coordinate_descent(problem, &s, lambda, opts, None, None)?;
    Ok(to_original(&s, &gamma))
}

/// Same as [`fit_weighted_lasso`] but also returns the objective after every sweep
/// (first entry: the starting point).
pub fn fit_weighted_lasso_traced(
    problem: &WeightedRegressionProblem,
    lambda: f64,
) -> Result<(LinearFit, Vec<f64>)> {
    check_lambda(lambda)?;
    let s = standardize(problem);
    let mut trace = Vec::new();
    let gamma = coordinate_descent(
        problem,
        &s,
        lambda,
        &LassoOptions::default(),
        None,
        Some(&mut trace),
    )?;
    Ok((to_original(&s, &gamma), trace))
}

/// Log-spaced grid from `lambda_max` downwards.
pub fn lambda_grid(problem: &WeightedRegressionProblem, cv: &LassoCvOptions) -> Vec<f64> {
    let top = lambda_max(problem).max(f64::MIN_POSITIVE);
    let k = cv.num_lambdas.max(1);
    if k == 1 {
        return vec![top];
    }
    (0..k)
        .map(|i| top * 10f64.powf(-cv.decades * i as f64 / (k - 1) as f64))
        .collect()
}

/// Select `lambda` by weighted K-fold cross-validation (fold of row `i` is
/// `i mod K`), then refit on all rows. Returns the fit and the chosen penalty.
pub fn fit_lasso_cv(
    problem: &WeightedRegressionProblem,
    cv: &LassoCvOptions,
) -> Result<(LinearFit, f64)> {
    let folds = cv.folds.max(2);
    if problem.n() < folds * 2 {
        return Err(Error::InvalidInput(format!(
            "{} rows are too few for {folds}-fold CV",
            problem.n()
        )));
    }
    let grid = lambda_grid(problem, cv);
    let opts = LassoOptions::default();
    let mut cv_error = vec![0.0; grid.len()];
    for fold in 0..folds {
        let train: Vec<usize> = (0..problem.n()).filter(|i| i % folds != fold).collect();
        let test: Vec<usize> = (0..problem.n()).filter(|i| i % folds == fold).collect();
        let sub = problem.subset(&train);
        let s = standardize(&sub);
        let mut warm: Option<Vec<f64>> = None;
        for (k, &lambda) in grid.iter().enumerate() {
            let gamma = coordinate_descent(&sub, &s, lambda, &opts, warm.as_deref(), None)?;
            let fit = to_original(&s, &gamma);
            warm = Some(gamma);
            let design = problem.design();
            cv_error[k] += test
                .iter()
                .map(|&i| {
                    let pred: f64 = (0..design.ncols())
                        .map(|j| design[(i, j)] * fit.beta[j])
                        .sum();
                    problem.weights()[i] * (problem.targets()[i] - pred).powi(2)
                })
                .sum::<f64>();
        }
    }
    let best = cv_error
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let lambda = grid[best];
    Ok((fit_weighted_lasso_with(problem, lambda, &opts)?, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::wls::solve_wls;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(n: usize, p: usize, seed: u64) -> WeightedRegressionProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let design = DMatrix::from_fn(n, p + 1, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let t = (0..n)
            .map(|i| 1.0 + 2.0 * design[(i, 1)] - design[(i, 2)] + rng.random_range(-0.5..0.5))
            .collect();
        let w = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
        WeightedRegressionProblem::from_design(design, t, w).unwrap()
    }

    #[test]
    fn lambda_max_kills_slopes() {
        let p = random_problem(60, 4, 1);
        let top = lambda_max(&p);
        let fit = fit_weighted_lasso(&p, top).unwrap();
        assert!(fit.slopes().iter().all(|b| *b == 0.0));
        let fit = fit_weighted_lasso(&p, top * 1.5).unwrap();
        assert!(fit.slopes().iter().all(|b| *b == 0.0));
        let below = fit_weighted_lasso(&p, top * 0.9).unwrap();
        assert!(below.slopes().iter().any(|b| *b != 0.0));
    }

    #[test]
    fn approaches_least_squares() {
        let p = random_problem(80, 3, 2);
        let lasso = fit_weighted_lasso(&p, 1e-9).unwrap();
        let ls = solve_wls(&p, 0.0).unwrap();
        for (a, b) in lasso.beta.iter().zip(&ls.beta) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn objective_never_increases() {
        let p = random_problem(50, 5, 3);
        let (_, trace) = fit_weighted_lasso_traced(&p, 0.05).unwrap();
        assert!(trace.len() > 2);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-14, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn rejects_nonpositive_penalty() {
        let p = random_problem(20, 2, 4);
        assert!(fit_weighted_lasso(&p, 0.0).is_err());
    }

    #[test]
    fn reports_last_iterate_on_budget_exhaustion() {
        let p = random_problem(40, 3, 5);
        let opts = LassoOptions {
            max_iter: 1,
            tol: 0.0,
        };
        match fit_weighted_lasso_with(&p, 0.01, &opts) {
            Err(Error::NotConverged { iterations, last }) => {
                assert_eq!(iterations, 1);
                assert_eq!(last.len(), 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cv_picks_grid_value() {
        let p = random_problem(100, 4, 6);
        let cv = LassoCvOptions::default();
        let (fit, lambda) = fit_lasso_cv(&p, &cv).unwrap();
        let grid = lambda_grid(&p, &cv);
        assert_eq!(grid.len(), 50);
        assert!((grid[49] / grid[0] - 0.01).abs() < 1e-12);
        assert!(grid.contains(&lambda));
        assert!((fit.slopes()[0] - 2.0).abs() < 0.3);
    }
}
