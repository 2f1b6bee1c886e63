//! Nuisance quantities: instrument propensity, compliance difference, stratum
//! means, the residualizers g* and h*, and the plug-in Wald CATE.
//!
//! Treatment and instrument are coded -1/+1 throughout, so treatment means live
//! in [-1, 1] while `delta` stays on the probability-difference scale
//! (`mu_a_pos - mu_a_neg = 2 * delta`).

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Covariates, ObservedDataset};
use crate::dgp::TrueModel;
use crate::error::{Error, Result};
use crate::learners::{
    fit_forest, fit_logistic, solve_wls, ForestFit, ForestParams, LinearFit,
    WeightedRegressionProblem,
};
use crate::par::{derive_seed, map_indexed, Workers};

pub const DEFAULT_PI_CLIP: f64 = 0.01;
pub const DEFAULT_DELTA_FLOOR: f64 = 0.05;
/// Leaf size of the nuisance forests. Larger than the plain forest default
/// because `1 / delta_hat` amplifies noisy compliance estimates.
pub const NUISANCE_MIN_LEAF: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityLearner {
    KnownHalf,
    Logistic,
    Forest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaLearner {
    Forest,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanLearner {
    Forest,
    Ols,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NuisanceOptions {
    pub propensity: PropensityLearner,
    pub delta: DeltaLearner,
    pub means: MeanLearner,
    pub forest: ForestParams,
    pub pi_clip: f64,
    pub delta_floor: f64,
    /// Forest values at training rows are out-of-bag averages.
    pub out_of_bag: bool,
    /// K-fold cross-fitting of training-row values; 0 disables it.
    pub cross_fit_folds: usize,
    pub seed: u64,
}

impl Default for NuisanceOptions {
    fn default() -> Self {
        Self {
            propensity: PropensityLearner::Logistic,
            delta: DeltaLearner::Forest,
            means: MeanLearner::Forest,
            forest: ForestParams {
                min_leaf: NUISANCE_MIN_LEAF,
                ..ForestParams::default()
            },
            pi_clip: DEFAULT_PI_CLIP,
            delta_floor: DEFAULT_DELTA_FLOOR,
            out_of_bag: true,
            cross_fit_folds: 0,
            seed: 0,
        }
    }
}

impl NuisanceOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.pi_clip >= 0.0 && self.pi_clip < 0.5) {
            return Err(Error::Config(format!(
                "pi_clip must lie in [0, 0.5), got {}",
                self.pi_clip
            )));
        }
        if !(self.delta_floor > 0.0 && self.delta_floor <= 1.0) {
            return Err(Error::Config(format!(
                "delta_floor must lie in (0, 1], got {}",
                self.delta_floor
            )));
        }
        if self.cross_fit_folds == 1 {
            return Err(Error::Config(
                "cross_fit_folds must be 0 (off) or at least 2".into(),
            ));
        }
        if self.forest.num_trees == 0 {
            return Err(Error::Config("forest.num_trees must be positive".into()));
        }
        Ok(())
    }
}

/// One fitted scalar function of the covariates.
#[derive(Debug, Clone)]
pub enum Component {
    Constant(f64),
    Linear(LinearFit),
    /// Probability `expit(x~' beta)`.
    Logistic(LinearFit),
    Forest(ForestFit),
    Oracle(OracleQuantity),
}

/// Exact population quantities from the simulation model (quadrature over the confounder).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleQuantity {
    PiZ(TrueModel),
    TreatmentProbability(TrueModel, i8),
    OutcomeMean(TrueModel, i8),
}

impl Component {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(match self {
            Component::Constant(c) => *c,
            Component::Linear(fit) => fit.predict(x),
            Component::Logistic(fit) => fit.predict_probability(x),
            Component::Forest(fit) => fit.predict(x),
            Component::Oracle(OracleQuantity::PiZ(t)) => t.pi_z(x),
            Component::Oracle(OracleQuantity::TreatmentProbability(t, z)) => {
                t.marginal_p_a(x, *z)?
            }
            Component::Oracle(OracleQuantity::OutcomeMean(t, z)) => t.mean_outcome(x, *z)?,
        })
    }

    fn describe(&self) -> String {
        match self {
            Component::Constant(c) => format!("constant({c:e})"),
            Component::Linear(fit) => format!("linear{:?}", fit.beta),
            Component::Logistic(fit) => format!("logistic{:?}", fit.beta),
            Component::Forest(fit) => format!(
                "forest({} trees, seed {})",
                fit.trees.len(),
                fit.params.seed
            ),
            Component::Oracle(q) => format!("oracle({q:?})"),
        }
    }

    /// Values at every training row. Forest values for the rows it was fitted
    /// on (`fitted_rows`) are out-of-bag when `out_of_bag` is set.
    fn training_values(
        &self,
        x: &Covariates,
        fitted_rows: &[usize],
        out_of_bag: bool,
    ) -> Result<Vec<f64>> {
        let mut values = map_indexed(x.nrows(), Workers::AUTO, |i| self.predict(x.row(i)))
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
        if let (Component::Forest(fit), true) = (self, out_of_bag) {
            for (k, &i) in fitted_rows.iter().enumerate() {
                values[i] = fit.oob_predictions()[k];
            }
        }
        Ok(values)
    }
}

#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub component: Component,
    pub clip: f64,
}

impl PropensityModel {
    pub fn known_half() -> Self {
        Self {
            component: Component::Constant(0.5),
            clip: DEFAULT_PI_CLIP,
        }
    }

    /// Clipped `P(Z = +1 | x)`.
    pub fn pi_pos(&self, x: &[f64]) -> Result<f64> {
        Ok(clip_probability(self.component.predict(x)?, self.clip))
    }

    /// `P(Z = z | x)`; the two values sum to one exactly.
    pub fn pi(&self, z: i8, x: &[f64]) -> Result<f64> {
        let p = self.pi_pos(x)?;
        Ok(if z == 1 { p } else { 1.0 - p })
    }
}

/// `P(A = +1 | Z = z, x)` per stratum; `delta` is their difference.
#[derive(Debug, Clone)]
pub struct DeltaModel {
    pub p_pos: Component,
    pub p_neg: Component,
    pub clip: f64,
    pub floor: f64,
}

impl DeltaModel {
    pub fn probabilities(&self, x: &[f64]) -> Result<(f64, f64)> {
        Ok((
            clip_probability(self.p_pos.predict(x)?, self.clip),
            clip_probability(self.p_neg.predict(x)?, self.clip),
        ))
    }

    pub fn delta_raw(&self, x: &[f64]) -> Result<f64> {
        let (p, q) = self.probabilities(x)?;
        Ok(p - q)
    }

    pub fn delta(&self, x: &[f64]) -> Result<f64> {
        Ok(floor_delta(self.delta_raw(x)?, self.floor))
    }
}

/// Outcome means per instrument stratum. Treatment means come from the
/// [`DeltaModel`] as `2p - 1`.
#[derive(Debug, Clone)]
pub struct ConditionalMeans {
    pub mu_y_pos: Component,
    pub mu_y_neg: Component,
}

/// Source of the outcome regressions averaged into `g*`.
#[derive(Debug, Clone)]
pub enum GStarModel {
    /// `(mu_y_pos + mu_y_neg) / 2` from the fitted [`ConditionalMeans`].
    StratumMeans,
    /// Same average over per-stratum OLS fits (a deliberately misspecified surrogate).
    Ols { pos: LinearFit, neg: LinearFit },
}

/// Shared CATE function supplied by the caller.
pub type CateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Preliminary CATE used inside `h*`.
#[derive(Clone)]
pub enum PrelimCate {
    Wald,
    Zero,
    External(CateFn),
}

impl fmt::Debug for PrelimCate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrelimCate::Wald => f.write_str("Wald"),
            PrelimCate::Zero => f.write_str("Zero"),
            PrelimCate::External(_) => f.write_str("External"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HVariant {
    H1,
    H2,
    H3,
}

impl fmt::Display for HVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HVariant::H1 => "h1",
            HVariant::H2 => "h2",
            HVariant::H3 => "h3",
        })
    }
}

/// Every nuisance value at one covariate vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisancePoint {
    pub pi_pos: f64,
    pub delta_raw: f64,
    /// Floored: `|delta| >= floor`, sign kept.
    pub delta: f64,
    pub mu_y_pos: f64,
    pub mu_y_neg: f64,
    pub mu_a_pos: f64,
    pub mu_a_neg: f64,
    pub g_star: f64,
    pub prelim_cate: f64,
}

impl NuisancePoint {
    pub fn pi(&self, z: i8) -> f64 {
        if z == 1 {
            self.pi_pos
        } else {
            1.0 - self.pi_pos
        }
    }

    pub fn m_y(&self) -> f64 {
        0.5 * (self.mu_y_pos + self.mu_y_neg)
    }

    pub fn m_a(&self) -> f64 {
        0.5 * (self.mu_a_pos + self.mu_a_neg)
    }

    pub fn wald(&self) -> f64 {
        prelim_cate_wald(self.mu_y_pos, self.mu_y_neg, self.delta)
    }

    pub fn h_star(&self, variant: HVariant, a: i8, z: i8) -> f64 {
        compute_h_star(variant, self, a, z)
    }
}

pub fn clip_probability(p: f64, clip: f64) -> f64 {
    p.clamp(clip, 1.0 - clip)
}

/// `|d| >= floor` with the sign kept; zero counts as positive.
pub fn floor_delta(d: f64, floor: f64) -> f64 {
    if d.abs() >= floor {
        d
    } else if d >= 0.0 {
        floor
    } else {
        -floor
    }
}

/// `(mu_y_pos + mu_y_neg) / 2`.
pub fn compute_g_star(mu_y_pos: f64, mu_y_neg: f64) -> f64 {
    0.5 * (mu_y_pos + mu_y_neg)
}

/// Conditional Wald ratio with an already floored denominator.
pub fn prelim_cate_wald(mu_y_pos: f64, mu_y_neg: f64, delta: f64) -> f64 {
    (mu_y_pos - mu_y_neg) / delta
}

/// The three equivalent residualizers `h*(x, a, z)` built from one nuisance point.
pub fn compute_h_star(variant: HVariant, p: &NuisancePoint, a: i8, z: i8) -> f64 {
    let a = f64::from(a);
    let zd = f64::from(z) * p.delta;
    let slope = 0.5 * p.prelim_cate;
    match variant {
        HVariant::H1 => p.mu_y_pos + slope * (a - p.mu_a_pos - zd),
        HVariant::H2 => p.mu_y_neg + slope * (a - p.mu_a_neg - zd),
        HVariant::H3 => p.m_y() + slope * (a - p.m_a() - zd),
    }
}

/// `sum_{z,a} z h(a, z) / pi(z) * P(z, a | x)` at a fixed `x`. Zero for any
/// residualizer that leaves the weighted IV objective's minimizer unchanged.
pub fn check_eq5_constraint<H, L, P>(h: H, law: L, pi: P) -> f64
where
    H: Fn(i8, i8) -> f64,
    L: Fn(i8, i8) -> f64,
    P: Fn(i8) -> f64,
{
    let mut total = 0.0;
    for z in [1i8, -1] {
        for a in [1i8, -1] {
            total += f64::from(z) * h(a, z) / pi(z) * law(z, a);
        }
    }
    total
}

pub fn estimate_pi_z(
    data: &ObservedDataset,
    learner: PropensityLearner,
    opts: &NuisanceOptions,
) -> Result<PropensityModel> {
    let component = match learner {
        PropensityLearner::KnownHalf => Component::Constant(0.5),
        PropensityLearner::Logistic => {
            check_instrument(data)?;
            Component::Logistic(fit_logistic(data.x(), data.z(), None)?)
        }
        PropensityLearner::Forest => {
            check_instrument(data)?;
            let t: Vec<f64> = data.z().iter().map(|&z| indicator(z)).collect();
            Component::Forest(fit_forest(data.x(), &t, &forest_params(opts, 0))?)
        }
    };
    Ok(PropensityModel {
        component,
        clip: opts.pi_clip,
    })
}

pub fn estimate_delta(
    data: &ObservedDataset,
    learner: DeltaLearner,
    opts: &NuisanceOptions,
) -> Result<DeltaModel> {
    check_instrument(data)?;
    let fit = |z: i8, stream: u64| -> Result<Component> {
        let rows = data.stratum(z);
        let x = data.x().select_rows(&rows);
        let a: Vec<i8> = rows.iter().map(|&i| data.a()[i]).collect();
        match learner {
            DeltaLearner::Logistic => Ok(Component::Logistic(fit_logistic(&x, &a, None)?)),
            DeltaLearner::Forest => {
                let t: Vec<f64> = a.iter().map(|&v| indicator(v)).collect();
                Ok(Component::Forest(fit_forest(
                    &x,
                    &t,
                    &forest_params(opts, stream),
                )?))
            }
        }
    };
    Ok(DeltaModel {
        p_pos: fit(1, 1)?,
        p_neg: fit(-1, 2)?,
        clip: opts.pi_clip,
        floor: opts.delta_floor,
    })
}

pub fn estimate_conditional_means(
    data: &ObservedDataset,
    learner: MeanLearner,
    opts: &NuisanceOptions,
) -> Result<ConditionalMeans> {
    check_instrument(data)?;
    let fit = |z: i8, stream: u64| -> Result<Component> {
        let rows = data.stratum(z);
        let x = data.x().select_rows(&rows);
        let y: Vec<f64> = rows.iter().map(|&i| data.y()[i]).collect();
        match learner {
            MeanLearner::Forest => Ok(Component::Forest(fit_forest(
                &x,
                &y,
                &forest_params(opts, stream),
            )?)),
            MeanLearner::Ols => Ok(Component::Linear(fit_ols(&x, y)?)),
        }
    };
    Ok(ConditionalMeans {
        mu_y_pos: fit(1, 3)?,
        mu_y_neg: fit(-1, 4)?,
    })
}

fn fit_ols(x: &Covariates, y: Vec<f64>) -> Result<LinearFit> {
    let n = y.len();
    solve_wls(&WeightedRegressionProblem::new(x, y, vec![1.0; n])?, 0.0)
}

fn forest_params(opts: &NuisanceOptions, stream: u64) -> ForestParams {
    ForestParams {
        seed: derive_seed(opts.seed, stream),
        ..opts.forest
    }
}

fn indicator(v: i8) -> f64 {
    if v == 1 {
        1.0
    } else {
        0.0
    }
}

fn check_instrument(data: &ObservedDataset) -> Result<()> {
    let pos = data.z().iter().filter(|&&z| z == 1).count();
    if pos == 0 || pos == data.len() {
        return Err(Error::DegenerateInstrument(format!(
            "the instrument takes a single value on all {} rows",
            data.len()
        )));
    }
    Ok(())
}

/// All nuisance models for one dataset, with their values at the training rows
/// cached so every estimator sees bit-identical inputs.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    pub propensity: PropensityModel,
    pub delta: DeltaModel,
    pub means: ConditionalMeans,
    pub g_star: GStarModel,
    pub prelim: PrelimCate,
    rows: Vec<NuisancePoint>,
    fingerprint: String,
}

/// Raw component values at the training rows.
struct RowValues {
    pi_pos: Vec<f64>,
    p_pos: Vec<f64>,
    p_neg: Vec<f64>,
    mu_y_pos: Vec<f64>,
    mu_y_neg: Vec<f64>,
}

impl NuisanceSet {
    /// Fit every component on `data` per `opts`.
    pub fn fit(data: &ObservedDataset, opts: &NuisanceOptions) -> Result<Self> {
        opts.validate()?;
        check_instrument(data)?;
        let propensity = estimate_pi_z(data, opts.propensity, opts)?;
        let delta = estimate_delta(data, opts.delta, opts)?;
        let means = estimate_conditional_means(data, opts.means, opts)?;
        let values = if opts.cross_fit_folds >= 2 {
            cross_fit_values(data, opts)?
        } else {
            let pos = data.stratum(1);
            let neg = data.stratum(-1);
            let x = data.x();
            RowValues {
                pi_pos: propensity.component.training_values(
                    x,
                    &(0..data.len()).collect::<Vec<_>>(),
                    opts.out_of_bag,
                )?,
                p_pos: delta.p_pos.training_values(x, &pos, opts.out_of_bag)?,
                p_neg: delta.p_neg.training_values(x, &neg, opts.out_of_bag)?,
                mu_y_pos: means.mu_y_pos.training_values(x, &pos, opts.out_of_bag)?,
                mu_y_neg: means.mu_y_neg.training_values(x, &neg, opts.out_of_bag)?,
            }
        };
        let mut set = Self {
            propensity,
            delta,
            means,
            g_star: GStarModel::StratumMeans,
            prelim: PrelimCate::Wald,
            rows: Vec::new(),
            fingerprint: String::new(),
        };
        set.rows = (0..data.len())
            .map(|i| {
                set.assemble(
                    data.x().row(i),
                    values.pi_pos[i],
                    values.p_pos[i],
                    values.p_neg[i],
                    values.mu_y_pos[i],
                    values.mu_y_neg[i],
                )
            })
            .collect();
        set.refresh_fingerprint();
        Ok(set)
    }

    /// Exact nuisances from the simulation model, evaluated at `data`'s rows.
    pub fn oracle(
        truth: TrueModel,
        data: &ObservedDataset,
        opts: &NuisanceOptions,
    ) -> Result<Self> {
        let mut set = Self {
            propensity: PropensityModel {
                component: Component::Oracle(OracleQuantity::PiZ(truth)),
                clip: opts.pi_clip,
            },
            delta: DeltaModel {
                p_pos: Component::Oracle(OracleQuantity::TreatmentProbability(truth, 1)),
                p_neg: Component::Oracle(OracleQuantity::TreatmentProbability(truth, -1)),
                clip: opts.pi_clip,
                floor: opts.delta_floor,
            },
            means: ConditionalMeans {
                mu_y_pos: Component::Oracle(OracleQuantity::OutcomeMean(truth, 1)),
                mu_y_neg: Component::Oracle(OracleQuantity::OutcomeMean(truth, -1)),
            },
            g_star: GStarModel::StratumMeans,
            prelim: PrelimCate::Wald,
            rows: Vec::new(),
            fingerprint: String::new(),
        };
        set.rows = set.points(data.x())?;
        set.refresh_fingerprint();
        Ok(set)
    }

    fn assemble(
        &self,
        x: &[f64],
        pi_pos: f64,
        p_pos: f64,
        p_neg: f64,
        mu_y_pos: f64,
        mu_y_neg: f64,
    ) -> NuisancePoint {
        let pi_pos = clip_probability(pi_pos, self.propensity.clip);
        let p_pos = clip_probability(p_pos, self.delta.clip);
        let p_neg = clip_probability(p_neg, self.delta.clip);
        let delta_raw = p_pos - p_neg;
        let delta = floor_delta(delta_raw, self.delta.floor);
        let g_star = match &self.g_star {
            GStarModel::StratumMeans => compute_g_star(mu_y_pos, mu_y_neg),
            GStarModel::Ols { pos, neg } => compute_g_star(pos.predict(x), neg.predict(x)),
        };
        let prelim_cate = match &self.prelim {
            PrelimCate::Wald => prelim_cate_wald(mu_y_pos, mu_y_neg, delta),
            PrelimCate::Zero => 0.0,
            PrelimCate::External(f) => f(x),
        };
        NuisancePoint {
            pi_pos,
            delta_raw,
            delta,
            mu_y_pos,
            mu_y_neg,
            mu_a_pos: 2.0 * p_pos - 1.0,
            mu_a_neg: 2.0 * p_neg - 1.0,
            g_star,
            prelim_cate,
        }
    }

    /// Nuisance values at a new covariate vector (full-model predictions).
    pub fn point(&self, x: &[f64]) -> Result<NuisancePoint> {
        Ok(self.assemble(
            x,
            self.propensity.component.predict(x)?,
            self.delta.p_pos.predict(x)?,
            self.delta.p_neg.predict(x)?,
            self.means.mu_y_pos.predict(x)?,
            self.means.mu_y_neg.predict(x)?,
        ))
    }

    pub fn points(&self, x: &Covariates) -> Result<Vec<NuisancePoint>> {
        map_indexed(x.nrows(), Workers::AUTO, |i| self.point(x.row(i)))
            .into_iter()
            .collect()
    }

    /// Values at the training rows.
    pub fn rows(&self) -> &[NuisancePoint] {
        &self.rows
    }

    /// SHA-256 over the component descriptions and every cached training-row value.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn refresh_fingerprint(&mut self) {
        let mut hasher = Sha256::new();
        for part in [
            self.propensity.component.describe(),
            self.delta.p_pos.describe(),
            self.delta.p_neg.describe(),
            self.means.mu_y_pos.describe(),
            self.means.mu_y_neg.describe(),
            format!("{:?}|{:?}", self.g_star, self.prelim),
        ] {
            hasher.update(part.as_bytes());
        }
        for p in &self.rows {
            for v in [
                p.pi_pos,
                p.delta_raw,
                p.delta,
                p.mu_y_pos,
                p.mu_y_neg,
                p.mu_a_pos,
                p.mu_a_neg,
                p.g_star,
                p.prelim_cate,
            ] {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        self.fingerprint = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
    }

    /// Replace the propensity model with the constant 1/2.
    pub fn with_half_propensity(&self) -> Self {
        let mut out = self.clone();
        out.propensity = PropensityModel {
            component: Component::Constant(0.5),
            clip: self.propensity.clip,
        };
        for p in &mut out.rows {
            p.pi_pos = 0.5;
        }
        out.refresh_fingerprint();
        out
    }

    /// Replace the regressions behind `g*` with unweighted per-stratum OLS on `data`.
    pub fn with_ols_g_star(&self, data: &ObservedDataset) -> Result<Self> {
        self.check_rows(data)?;
        let fit = |z: i8| {
            let rows = data.stratum(z);
            fit_ols(
                &data.x().select_rows(&rows),
                rows.iter().map(|&i| data.y()[i]).collect(),
            )
        };
        let (pos, neg) = (fit(1)?, fit(-1)?);
        let mut out = self.clone();
        for (i, p) in out.rows.iter_mut().enumerate() {
            let x = data.x().row(i);
            p.g_star = compute_g_star(pos.predict(x), neg.predict(x));
        }
        out.g_star = GStarModel::Ols { pos, neg };
        out.refresh_fingerprint();
        Ok(out)
    }

    /// Swap the preliminary CATE used by `h*`; `data` must be the training data.
    pub fn with_prelim(&self, prelim: PrelimCate, data: &ObservedDataset) -> Result<Self> {
        self.check_rows(data)?;
        let mut out = self.clone();
        out.prelim = prelim;
        for (i, p) in out.rows.iter_mut().enumerate() {
            p.prelim_cate = match &out.prelim {
                PrelimCate::Wald => p.wald(),
                PrelimCate::Zero => 0.0,
                PrelimCate::External(f) => f(data.x().row(i)),
            };
        }
        out.refresh_fingerprint();
        Ok(out)
    }

    fn check_rows(&self, data: &ObservedDataset) -> Result<()> {
        if data.len() != self.rows.len() {
            return Err(Error::DimensionMismatch {
                expected: self.rows.len(),
                got: data.len(),
            });
        }
        Ok(())
    }

    /// Diagnostic CSV of the training-row values.
    pub fn write_csv<W: Write>(&self, x: &Covariates, writer: W) -> Result<()> {
        write_points_csv(x, &self.rows, writer)
    }
}

/// `x1..xp,pi_z,delta_raw,delta_floored,mu_y_pos,mu_y_neg,g_star,prelim_cate`.
pub fn write_points_csv<W: Write>(
    x: &Covariates,
    points: &[NuisancePoint],
    writer: W,
) -> Result<()> {
    if x.nrows() != points.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: points.len(),
        });
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
    header.extend(
        [
            "pi_z",
            "delta_raw",
            "delta_floored",
            "mu_y_pos",
            "mu_y_neg",
            "g_star",
            "prelim_cate",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for (row, p) in x.rows().zip(points) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.extend(
            [
                p.pi_pos,
                p.delta_raw,
                p.delta,
                p.mu_y_pos,
                p.mu_y_neg,
                p.g_star,
                p.prelim_cate,
            ]
            .map(|v| v.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Training-row values where row `i` is predicted by models fitted without fold `i mod k`.
fn cross_fit_values(data: &ObservedDataset, opts: &NuisanceOptions) -> Result<RowValues> {
    let k = opts.cross_fit_folds;
    let n = data.len();
    let mut out = RowValues {
        pi_pos: vec![0.0; n],
        p_pos: vec![0.0; n],
        p_neg: vec![0.0; n],
        mu_y_pos: vec![0.0; n],
        mu_y_neg: vec![0.0; n],
    };
    for fold in 0..k {
        let train: Vec<usize> = (0..n).filter(|i| i % k != fold).collect();
        let held: Vec<usize> = (0..n).filter(|i| i % k == fold).collect();
        let sub = data.subset(&train);
        let fold_opts = NuisanceOptions {
            seed: derive_seed(opts.seed, 1000 + fold as u64),
            ..*opts
        };
        let pi = estimate_pi_z(&sub, opts.propensity, &fold_opts)?;
        let delta = estimate_delta(&sub, opts.delta, &fold_opts)?;
        let means = estimate_conditional_means(&sub, opts.means, &fold_opts)?;
        for &i in &held {
            let x = data.x().row(i);
            out.pi_pos[i] = pi.component.predict(x)?;
            out.p_pos[i] = delta.p_pos.predict(x)?;
            out.p_neg[i] = delta.p_neg.predict(x)?;
            out.mu_y_pos[i] = means.mu_y_pos.predict(x)?;
            out.mu_y_neg[i] = means.mu_y_neg.predict(x)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate_dataset, SettingId};

    fn point(
        mu_y_pos: f64,
        mu_y_neg: f64,
        delta: f64,
        mu_a_pos: f64,
        mu_a_neg: f64,
    ) -> NuisancePoint {
        NuisancePoint {
            pi_pos: 0.5,
            delta_raw: delta,
            delta,
            mu_y_pos,
            mu_y_neg,
            mu_a_pos,
            mu_a_neg,
            g_star: compute_g_star(mu_y_pos, mu_y_neg),
            prelim_cate: prelim_cate_wald(mu_y_pos, mu_y_neg, delta),
        }
    }

    #[test]
    fn h_star_worked_example() {
        let p = point(2.0, 1.0, 0.5, 0.2, -0.8);
        assert_eq!(p.prelim_cate, 2.0);
        assert!((compute_h_star(HVariant::H1, &p, 1, 1) - 2.3).abs() < 1e-12);
        assert!((compute_h_star(HVariant::H2, &p, 1, 1) - 2.3).abs() < 1e-12);
        assert!((compute_h_star(HVariant::H3, &p, 1, 1) - 2.3).abs() < 1e-12);
    }

    #[test]
    fn zero_prelim_reduces_h1_to_stratum_mean() {
        let mut p = point(2.0, 1.0, 0.5, 0.2, -0.8);
        p.prelim_cate = 0.0;
        for (a, z) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
            assert_eq!(compute_h_star(HVariant::H1, &p, a, z), 2.0);
        }
    }

    #[test]
    fn g_star_and_wald_arithmetic() {
        assert_eq!(compute_g_star(3.0, 1.0), 2.0);
        assert_eq!(compute_g_star(1.7, -1.7), 0.0);
        assert_eq!(prelim_cate_wald(2.0, 1.0, 0.5), 2.0);
        assert_eq!(prelim_cate_wald(1.3, 1.3, 0.2), 0.0);
    }

    #[test]
    fn flooring() {
        assert_eq!(floor_delta(0.3, 0.05), 0.3);
        assert_eq!(floor_delta(0.01, 0.05), 0.05);
        assert_eq!(floor_delta(-0.01, 0.05), -0.05);
        assert_eq!(floor_delta(0.0, 0.05), 0.05);
        assert_eq!(floor_delta(-0.7, 0.05), -0.7);
    }

    #[test]
    fn orthogonality_controls() {
        let half = |_z: i8| 0.5;
        let law = |_z: i8, _a: i8| 0.25;
        assert_eq!(check_eq5_constraint(|_, _| 3.0, law, half), 0.0);
        assert_eq!(check_eq5_constraint(|_, z| f64::from(z), law, half), 2.0);
    }

    #[test]
    fn constant_outcome_means() {
        let (data, _) = generate_dataset(SettingId::Setting1, 400, 3).unwrap();
        let data = data.with_outcome(vec![1.5; 400]).unwrap();
        let opts = NuisanceOptions {
            forest: ForestParams {
                num_trees: 20,
                ..Default::default()
            },
            ..Default::default()
        };
        let set = NuisanceSet::fit(&data, &opts).unwrap();
        assert!(set
            .rows()
            .iter()
            .all(|p| p.mu_y_pos == 1.5 && p.mu_y_neg == 1.5 && p.g_star == 1.5));
        let q = set.point(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!((q.mu_y_pos, q.mu_y_neg), (1.5, 1.5));
    }

    #[test]
    fn injections_change_fingerprint() {
        let (data, _) = generate_dataset(SettingId::Setting3, 300, 4).unwrap();
        let opts = NuisanceOptions {
            forest: ForestParams {
                num_trees: 10,
                ..Default::default()
            },
            ..Default::default()
        };
        let set = NuisanceSet::fit(&data, &opts).unwrap();
        let again = NuisanceSet::fit(&data, &opts).unwrap();
        assert_eq!(set.fingerprint(), again.fingerprint());
        assert_eq!(set.fingerprint().len(), 64);
        let half = set.with_half_propensity();
        assert_ne!(half.fingerprint(), set.fingerprint());
        assert!(half.rows().iter().all(|p| p.pi_pos == 0.5));
        let ols = set.with_ols_g_star(&data).unwrap();
        assert_ne!(ols.fingerprint(), set.fingerprint());
        assert_eq!(ols.rows()[0].mu_y_pos, set.rows()[0].mu_y_pos);
    }

    #[test]
    fn degenerate_instrument() {
        let (data, _) = generate_dataset(SettingId::Setting1, 50, 5).unwrap();
        let z1 = ObservedDataset::new(
            data.y().to_vec(),
            data.x().clone(),
            data.a().to_vec(),
            vec![1; 50],
        )
        .unwrap();
        assert!(matches!(
            NuisanceSet::fit(&z1, &NuisanceOptions::default()),
            Err(Error::DegenerateInstrument(_))
        ));
    }

    #[test]
    fn cross_fitting_runs() {
        let (data, _) = generate_dataset(SettingId::Setting1, 300, 6).unwrap();
        let opts = NuisanceOptions {
            forest: ForestParams {
                num_trees: 10,
                ..Default::default()
            },
            cross_fit_folds: 3,
            ..Default::default()
        };
        let set = NuisanceSet::fit(&data, &opts).unwrap();
        assert_eq!(set.rows().len(), 300);
        assert!(set.rows().iter().all(|p| p.delta.abs() >= 0.05));
    }
}
