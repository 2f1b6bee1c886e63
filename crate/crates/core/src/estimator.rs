//! IV-DL, IV-RDL1 and IV-RDL2: weighted regressions of a modified outcome.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, ObservedDataset};
use crate::error::{Error, Result};
use crate::learners::{
    fit_krr_cv, fit_lasso_cv, fit_weighted_krr, fit_weighted_lasso, solve_wls, Bandwidth,
    KernelFit, LassoCvOptions, LinearFit, WeightedRegressionProblem,
};
use crate::nuisance::{compute_h_star, HVariant, NuisancePoint, NuisanceSet};

pub const DEFAULT_MAX_ANCHORS: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    IvDl,
    IvRdl1,
    IvRdl2(HVariant),
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::IvDl => "IV-DL".into(),
            Method::IvRdl1 => "IV-RDL1".into(),
            Method::IvRdl2(HVariant::H3) => "IV-RDL2".into(),
            Method::IvRdl2(v) => format!("IV-RDL2({v})"),
        }
    }

    /// What is subtracted from `y` before forming the modified outcome.
    pub fn residual(&self, p: &NuisancePoint, a: i8, z: i8) -> f64 {
        match self {
            Method::IvDl => 0.0,
            Method::IvRdl1 => p.g_star,
            Method::IvRdl2(v) => compute_h_star(*v, p, a, z),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// `ivdl`, `ivrdl1`, `ivrdl2` (H3) or `ivrdl2-h1` / `-h2` / `-h3`.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        match key.as_str() {
            "ivdl" | "iv-dl" => Ok(Method::IvDl),
            "ivrdl1" | "iv-rdl1" => Ok(Method::IvRdl1),
            "ivrdl2" | "iv-rdl2" | "ivrdl2-h3" | "iv-rdl2-h3" => Ok(Method::IvRdl2(HVariant::H3)),
            "ivrdl2-h1" | "iv-rdl2-h1" => Ok(Method::IvRdl2(HVariant::H1)),
            "ivrdl2-h2" | "iv-rdl2-h2" => Ok(Method::IvRdl2(HVariant::H2)),
            _ => Err(Error::Config(format!(
                "unknown method '{s}' (expected ivdl, ivrdl1, ivrdl2[-h1|-h2|-h3])"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LassoPenalty {
    Fixed(f64),
    Cv(LassoCvOptions),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KrrPenalty {
    Fixed(f64),
    Cv { grid: Vec<f64>, folds: usize },
}

impl Default for KrrPenalty {
    fn default() -> Self {
        KrrPenalty::Cv {
            grid: (0..7).map(|k| 10f64.powf(-3.0 + 0.5 * k as f64)).collect(),
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KrrOptions {
    pub penalty: KrrPenalty,
    pub bandwidth: Bandwidth,
    /// Above this many rows the fit uses a uniform subsample as anchors.
    pub max_anchors: usize,
    pub seed: u64,
}

impl Default for KrrOptions {
    fn default() -> Self {
        Self {
            penalty: KrrPenalty::default(),
            bandwidth: Bandwidth::Median,
            max_anchors: DEFAULT_MAX_ANCHORS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    /// Weighted least squares with an optional ridge on the slopes.
    Linear {
        ridge: f64,
    },
    Lasso(LassoPenalty),
    Krr(KrrOptions),
}

impl Learner {
    pub fn linear() -> Self {
        Learner::Linear { ridge: 0.0 }
    }

    pub fn lasso_cv() -> Self {
        Learner::Lasso(LassoPenalty::Cv(LassoCvOptions::default()))
    }

    pub fn krr() -> Self {
        Learner::Krr(KrrOptions::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Learner::Linear { .. } => "linear",
            Learner::Lasso(_) => "lasso",
            Learner::Krr(_) => "krr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub method: Method,
    pub learner: Learner,
}

impl EstimatorSpec {
    pub fn new(method: Method, learner: Learner) -> Self {
        Self { method, learner }
    }

    pub fn label(&self) -> String {
        self.method.label()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CateFit {
    Linear {
        fit: LinearFit,
        penalty: Option<f64>,
    },
    Kernel {
        fit: KernelFit,
        penalty: f64,
    },
}

/// Anything that yields a CATE estimate at a covariate vector.
pub trait CatePredictor: Send + Sync {
    fn predict(&self, x: &[f64]) -> Result<f64>;

    /// `sign(predict(x))` with `sign(0) = +1`.
    fn regime(&self, x: &[f64]) -> Result<i8> {
        Ok(sign(self.predict(x)?))
    }
}

pub fn sign(v: f64) -> i8 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateModel {
    pub spec: EstimatorSpec,
    pub fit: CateFit,
    pub dim: usize,
    pub nuisance_fingerprint: String,
}

impl CateModel {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| Error::InvalidInput(format!("cannot parse CATE model: {e}")))
    }
}

impl CatePredictor for CateModel {
    fn predict(&self, x: &[f64]) -> Result<f64> {
        predict_cate(self, x)
    }
}

/// The plug-in Wald ratio evaluated with full-model nuisance predictions.
pub struct WaldBaseline<'a> {
    pub nuisances: &'a NuisanceSet,
}

impl CatePredictor for WaldBaseline<'_> {
    fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.nuisances.point(x)?.wald())
    }
}

/// `2 (y - residual) z / delta_hat`.
pub fn modified_outcome(y: f64, z: i8, delta_hat: f64, residual: f64) -> f64 {
    2.0 * (y - residual) * f64::from(z) / delta_hat
}

/// Targets and `1 / pi(z, x)` weights of the weighted regression for `method`.
pub fn regression_inputs(
    data: &ObservedDataset,
    nuisances: &NuisanceSet,
    method: Method,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = nuisances.rows();
    if rows.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: rows.len(),
        });
    }
    let mut targets = Vec::with_capacity(data.len());
    let mut weights = Vec::with_capacity(data.len());
    for (i, p) in rows.iter().enumerate() {
        let (y, a, z) = (data.y()[i], data.a()[i], data.z()[i]);
        targets.push(modified_outcome(y, z, p.delta, method.residual(p, a, z)));
        weights.push(1.0 / p.pi(z));
    }
    Ok((targets, weights))
}

pub fn fit_cate(
    data: &ObservedDataset,
    nuisances: &NuisanceSet,
    spec: &EstimatorSpec,
) -> Result<CateModel> {
    let (targets, weights) = regression_inputs(data, nuisances, spec.method)?;
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numerical("non-finite modified outcome".into()));
    }
    let fit = fit_learner(data.x(), targets, weights, &spec.learner)?;
    Ok(CateModel {
        spec: spec.clone(),
        fit,
        dim: data.dim(),
        nuisance_fingerprint: nuisances.fingerprint().to_string(),
    })
}

/// Dispatch a weighted regression to the chosen learner.
pub fn fit_learner(
    x: &Covariates,
    targets: Vec<f64>,
    weights: Vec<f64>,
    learner: &Learner,
) -> Result<CateFit> {
    match learner {
        Learner::Linear { ridge } => {
            let problem = WeightedRegressionProblem::new(x, targets, weights)?;
            Ok(CateFit::Linear {
                fit: solve_wls(&problem, *ridge)?,
                penalty: None,
            })
        }
        Learner::Lasso(penalty) => {
            let problem = WeightedRegressionProblem::new(x, targets, weights)?;
            let (fit, lambda) = match penalty {
                LassoPenalty::Fixed(l) => (fit_weighted_lasso(&problem, *l)?, *l),
                LassoPenalty::Cv(cv) => fit_lasso_cv(&problem, cv)?,
            };
            Ok(CateFit::Linear {
                fit,
                penalty: Some(lambda),
            })
        }
        Learner::Krr(opts) => {
            let n = x.nrows();
            let (x, targets, weights) = if n > opts.max_anchors {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                let mut idx = sample(&mut rng, n, opts.max_anchors).into_vec();
                idx.sort_unstable();
                let t = idx.iter().map(|&i| targets[i]).collect();
                let w = idx.iter().map(|&i| weights[i]).collect();
                (x.select_rows(&idx), t, w)
            } else {
                (x.clone(), targets, weights)
            };
            let (fit, penalty) = match &opts.penalty {
                KrrPenalty::Fixed(l) => (
                    fit_weighted_krr(&x, &targets, &weights, *l, opts.bandwidth)?,
                    *l,
                ),
                KrrPenalty::Cv { grid, folds } => {
                    fit_krr_cv(&x, &targets, &weights, grid, *folds, opts.bandwidth)?
                }
            };
            Ok(CateFit::Kernel { fit, penalty })
        }
    }
}

pub fn predict_cate(model: &CateModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            got: x.len(),
        });
    }
    Ok(match &model.fit {
        CateFit::Linear { fit, .. } => fit.predict(x),
        CateFit::Kernel { fit, .. } => fit.predict(x),
    })
}

/// The estimated regime `x -> sign(cate_hat(x))`.
pub fn extract_itr(model: &CateModel) -> impl Fn(&[f64]) -> Result<i8> + '_ {
    move |x| model.regime(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::KernelFit;

    fn linear_model(beta: Vec<f64>) -> CateModel {
        CateModel {
            spec: EstimatorSpec::new(Method::IvDl, Learner::linear()),
            dim: beta.len() - 1,
            fit: CateFit::Linear {
                fit: LinearFit { beta },
                penalty: None,
            },
            nuisance_fingerprint: String::new(),
        }
    }

    #[test]
    fn modified_outcome_examples() {
        assert_eq!(modified_outcome(2.0, 1, 0.5, 0.0), 8.0);
        assert_eq!(modified_outcome(1.0, -1, 0.25, 0.0), -8.0);
        assert_eq!(modified_outcome(2.3, 1, 0.5, 2.3), 0.0);
    }

    #[test]
    fn linear_prediction_and_regime() {
        let m = linear_model(vec![0.4, -1.2, -1.6, 0.0, 0.0, 0.0]);
        assert!((predict_cate(&m, &[0.0; 5]).unwrap() - 0.4).abs() < 1e-15);
        let itr = extract_itr(&m);
        assert_eq!(itr(&[0.0; 5]).unwrap(), 1);
        assert_eq!(itr(&[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), -1);
        assert!(predict_cate(&m, &[0.0; 4]).is_err());
    }

    #[test]
    fn zero_prediction_is_positive_regime() {
        let m = linear_model(vec![0.0, 0.0]);
        assert_eq!(m.regime(&[3.0]).unwrap(), 1);
        let neg = linear_model(vec![-0.1, 0.0]);
        assert_eq!(neg.regime(&[3.0]).unwrap(), -1);
    }

    #[test]
    fn kernel_constant() {
        let anchors = Covariates::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let m = CateModel {
            spec: EstimatorSpec::new(Method::IvRdl1, Learner::krr()),
            dim: 2,
            fit: CateFit::Kernel {
                fit: KernelFit {
                    anchors,
                    dual_beta: vec![0.0, 0.0],
                    intercept: 1.7,
                    bandwidth: 0.5,
                },
                penalty: 0.1,
            },
            nuisance_fingerprint: String::new(),
        };
        assert_eq!(predict_cate(&m, &[0.3, -0.2]).unwrap(), 1.7);
    }

    #[test]
    fn json_round_trip() {
        let m = linear_model(vec![0.4, -1.2, -1.6, 0.0, 0.0, 0.0]);
        let back = CateModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("ivdl".parse::<Method>().unwrap(), Method::IvDl);
        assert_eq!("IV-RDL1".parse::<Method>().unwrap(), Method::IvRdl1);
        assert_eq!(
            "ivrdl2".parse::<Method>().unwrap(),
            Method::IvRdl2(HVariant::H3)
        );
        assert_eq!(
            "ivrdl2-h1".parse::<Method>().unwrap(),
            Method::IvRdl2(HVariant::H1)
        );
        assert!("ols".parse::<Method>().is_err());
    }
}
