//! Logistic regression by damped Newton iterations.

use nalgebra::{DMatrix, DVector};

use super::wls::LinearFit;
use crate::data::Covariates;
use crate::dgp::expit;
use crate::error::{Error, Result};

const MAX_ITER: usize = 100;
const GRAD_TOL: f64 = 1e-8;
/// Linear predictors beyond this size mean fitted probabilities within 1e-13 of 0 or 1.
const SEPARATION_ETA: f64 = 30.0;
pub const FALLBACK_RIDGE: f64 = 1e-6;

/// Fit `P(label = +1 | x) = expit(x~' beta)` on labels coded -1/+1.
///
/// Weights (default all one) are rescaled to mean one. On detected perfect
/// separation the fit is retried once with a ridge of [`FALLBACK_RIDGE`] on the
/// slopes; if that also diverges a [`Error::Separation`] is returned.
pub fn fit_logistic(x: &Covariates, labels: &[i8], weights: Option<&[f64]>) -> Result<LinearFit> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    crate::data::check_signs(labels, "labels")?;
    let w: Vec<f64> = match weights {
        Some(w) if w.len() != n => {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: w.len(),
            })
        }
        Some(w) if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) => {
            return Err(Error::InvalidInput(
                "logistic weights must be positive and finite".into(),
            ))
        }
        Some(w) => {
            let mean = w.iter().sum::<f64>() / n as f64;
            w.iter().map(|v| v / mean).collect()
        }
        None => vec![1.0; n],
    };
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == n {
        return Err(Error::Separation("only one class present".into()));
    }
    let design = x.design();
    let y: Vec<f64> = labels
        .iter()
        .map(|&l| if l == 1 { 1.0 } else { 0.0 })
        .collect();
    match newton(&design, &y, &w, 0.0) {
        Ok(fit) => Ok(fit),
        Err(Error::Separation(_)) | Err(Error::NotConverged { .. }) => {
            log::debug!("logistic fit diverged; retrying with ridge {FALLBACK_RIDGE}");
            newton(&design, &y, &w, FALLBACK_RIDGE).map_err(|e| match e {
                Error::NotConverged { .. } => {
                    Error::Separation("ridge retry did not converge".into())
                }
                other => other,
            })
        }
        Err(e) => Err(e),
    }
}

fn log_likelihood(
    design: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    beta: &DVector<f64>,
    ridge: f64,
) -> f64 {
    let eta = design * beta;
    let n = y.len() as f64;
    let ll: f64 = eta
        .iter()
        .zip(y)
        .zip(w)
        .map(|((e, yi), wi)| {
            // log(1 + exp(e)) computed stably
            let softplus = if *e > 0.0 {
                e + (-e).exp().ln_1p()
            } else {
                e.exp().ln_1p()
            };
            wi * (yi * e - softplus)
        })
        .sum::<f64>()
        / n;
    ll - ridge * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
}

fn newton(design: &DMatrix<f64>, y: &[f64], w: &[f64], ridge: f64) -> Result<LinearFit> {
    let n = y.len();
    let k = design.ncols();
    let mut beta = DVector::<f64>::zeros(k);
    let mut current = log_likelihood(design, y, w, &beta, ridge);
    for _ in 0..MAX_ITER {
        let eta = design * &beta;
        let mut grad = DVector::<f64>::zeros(k);
        let mut hess = DMatrix::<f64>::zeros(k, k);
        for i in 0..n {
            let p = expit(eta[i]);
            let row = design.row(i);
            let r = w[i] * (y[i] - p);
            let v = w[i] * p * (1.0 - p);
            for a in 0..k {
                grad[a] += r * row[a];
                for b in a..k {
                    hess[(a, b)] += v * row[a] * row[b];
                }
            }
        }
        grad /= n as f64;
        hess /= n as f64;
        for a in 0..k {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        for j in 1..k {
            grad[j] -= 2.0 * ridge * beta[j];
            hess[(j, j)] += 2.0 * ridge;
        }
        if grad.amax() < GRAD_TOL {
            return Ok(LinearFit {
                beta: beta.iter().copied().collect(),
            });
        }
        let step = match hess.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => {
                return Err(Error::Separation("information matrix is singular".into()));
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta + &step * t;
            let value = log_likelihood(design, y, w, &candidate, ridge);
            if value >= current - 1e-15 {
                beta = candidate;
                current = value;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NotConverged {
                iterations: MAX_ITER,
                last: beta.iter().copied().collect(),
            });
        }
        let max_eta = (design * &beta).amax();
        if ridge == 0.0 && max_eta > SEPARATION_ETA {
            return Err(Error::Separation(format!(
                "linear predictor reached {max_eta:.1}"
            )));
        }
    }
    Err(Error::NotConverged {
        iterations: MAX_ITER,
        last: beta.iter().copied().collect(),
    })
}

impl LinearFit {
    /// `expit(x~' beta)`.
    pub fn predict_probability(&self, x: &[f64]) -> f64 {
        expit(self.predict(x))
    }
}
