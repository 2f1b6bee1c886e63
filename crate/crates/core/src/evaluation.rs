//! Metrics, misspecification injection and the Monte Carlo replication harness.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Covariates, ObservedDataset};
use crate::dgp::{generate_dataset, oracle_value, sample_covariates, SettingId, TrueModel};
use crate::error::{Error, Result};
use crate::estimator::{
    fit_cate, sign, CatePredictor, EstimatorSpec, KrrOptions, Learner, Method, WaldBaseline,
};
use crate::nuisance::{HVariant, NuisanceOptions, NuisanceSet};
use crate::par::{derive_seed, map_indexed, Workers};

/// Points whose true CATE is this close to zero carry no regime information.
pub const AR_ZERO_TOL: f64 = 1e-12;

pub const WALD_LABEL: &str = "Wald";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misspecification {
    WrongPropensityHalf,
    OlsGStar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpreadKind {
    /// Standard error of the mean, `sd / sqrt(R)`.
    #[default]
    StandardError,
    StandardDeviation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub setting: SettingId,
    pub n_train: usize,
    pub n_test: usize,
    pub replications: usize,
    pub master_seed: u64,
    pub estimators: Vec<EstimatorSpec>,
    /// Also report the plug-in Wald ratio.
    pub include_wald: bool,
    pub misspecification: BTreeSet<Misspecification>,
    pub nuisance: NuisanceOptions,
    /// Draw a fresh test sample in every replication; otherwise one sample is shared.
    pub redraw_test: bool,
    pub spread: SpreadKind,
}

impl SimulationConfig {
    /// IV-DL, IV-RDL1 and IV-RDL2 (H3) with `learner`, plus the Wald baseline.
    pub fn new(setting: SettingId, learner: Learner) -> Self {
        let estimators = [Method::IvDl, Method::IvRdl1, Method::IvRdl2(HVariant::H3)]
            .into_iter()
            .map(|m| EstimatorSpec::new(m, learner.clone()))
            .collect();
        Self {
            setting,
            n_train: 500,
            n_test: 5000,
            replications: 100,
            master_seed: 0,
            estimators,
            include_wald: true,
            misspecification: BTreeSet::new(),
            nuisance: NuisanceOptions::default(),
            redraw_test: true,
            spread: SpreadKind::StandardError,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.n_train < 2 {
            return Err(Error::Config("n_train must be at least 2".into()));
        }
        if self.n_test == 0 {
            return Err(Error::Config("n_test must be at least 1".into()));
        }
        if self.estimators.is_empty() && !self.include_wald {
            return Err(Error::Config("no estimators configured".into()));
        }
        check_flags(self.setting, &self.misspecification)?;
        self.nuisance.validate()
    }
}

fn check_flags(setting: SettingId, flags: &BTreeSet<Misspecification>) -> Result<()> {
    if !flags.is_empty() && !setting.has_covariate_instrument() {
        return Err(Error::Config(format!(
            "misspecification flags need a covariate-dependent instrument model (settings 3 and 4), got {setting}"
        )));
    }
    Ok(())
}

/// Mean of `(cate_hat(x) - cate(x))^2` over the test rows.
pub fn metric_mse(
    model: &dyn CatePredictor,
    truth: &TrueModel,
    test_x: &Covariates,
) -> Result<f64> {
    Ok(Metrics::from_predictions(&predictions(model, test_x)?, truth, test_x).mse)
}

/// Share of test rows whose estimated regime matches the optimal one.
pub fn metric_ar(model: &dyn CatePredictor, truth: &TrueModel, test_x: &Covariates) -> Result<f64> {
    Ok(Metrics::from_predictions(&predictions(model, test_x)?, truth, test_x).ar)
}

/// Value of the estimated regime on the test rows.
pub fn metric_value(
    model: &dyn CatePredictor,
    truth: &TrueModel,
    test_x: &Covariates,
) -> Result<f64> {
    Ok(Metrics::from_predictions(&predictions(model, test_x)?, truth, test_x).value)
}

pub fn predictions(model: &dyn CatePredictor, test_x: &Covariates) -> Result<Vec<f64>> {
    test_x.rows().map(|x| model.predict(x)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub ar: f64,
    pub value: f64,
}

impl Metrics {
    /// All three metrics from CATE predictions at the rows of `test_x`.
    pub fn from_predictions(pred: &[f64], truth: &TrueModel, test_x: &Covariates) -> Self {
        let n = test_x.nrows() as f64;
        let (mut sq, mut hits, mut counted, mut value) = (0.0, 0usize, 0usize, 0.0);
        for (x, &p) in test_x.rows().zip(pred) {
            let cate = truth.cate(x);
            sq += (p - cate).powi(2);
            let regime = sign(p);
            if cate.abs() >= AR_ZERO_TOL {
                counted += 1;
                if regime == truth.optimal_regime(x) {
                    hits += 1;
                }
            }
            value += truth.h(x) + truth.treatment_loading(x) * f64::from(regime);
        }
        Metrics {
            mse: sq / n,
            ar: if counted == 0 {
                1.0
            } else {
                hits as f64 / counted as f64
            },
            value: value / n,
        }
    }
}

/// Value of the optimal regime on the test rows.
pub fn max_value(truth: &TrueModel, test_x: &Covariates) -> f64 {
    oracle_value(truth, |x| truth.optimal_regime(x), test_x)
}

pub fn inject_misspecification(
    nuisances: &NuisanceSet,
    flags: &BTreeSet<Misspecification>,
    data: &ObservedDataset,
    setting: SettingId,
) -> Result<NuisanceSet> {
    check_flags(setting, flags)?;
    let mut out = nuisances.clone();
    for flag in flags {
        out = match flag {
            Misspecification::WrongPropensityHalf => out.with_half_propensity(),
            Misspecification::OlsGStar => out.with_ols_g_star(data)?,
        };
    }
    Ok(out)
}

/// One estimator's outcome in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub estimator: String,
    pub mse: f64,
    pub ar: f64,
    pub value: f64,
    pub max_value: f64,
    pub nuisance_fingerprint: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: String,
    pub mse: Summary,
    pub ar: Summary,
    pub value: Summary,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub setting: SettingId,
    pub replications: usize,
    pub spread: SpreadKind,
    pub rows: Vec<MetricsRow>,
    /// Across-replication mean of each test sample's optimal value.
    pub max_value: Summary,
    /// Set when only one replication ran, so every spread is reported as 0.
    pub single_replication: bool,
    pub records: Vec<ReplicationRecord>,
}

impl MetricsTable {
    pub fn row(&self, estimator: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    pub fn total_failures(&self) -> usize {
        self.rows.iter().map(|r| r.failures).sum()
    }

    /// Aligned table of `mean x 100 (spread x 100)`.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let spread = match self.spread {
            SpreadKind::StandardError => "SE",
            SpreadKind::StandardDeviation => "SD",
        };
        let _ = writeln!(
            out,
            "Setting {} | {} replications | mean x 1e-2 ({spread} x 1e-2)",
            self.setting.number(),
            self.replications
        );
        let _ = writeln!(
            out,
            "{:<14} {:>16} {:>16} {:>16} {:>9}",
            "estimator", "MSE", "AR", "Value", "failures"
        );
        let cell = |s: &Summary| format!("{:.1} ({:.1})", 100.0 * s.mean, 100.0 * s.spread);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:>16} {:>16} {:>16} {:>9}",
                r.estimator,
                cell(&r.mse),
                cell(&r.ar),
                cell(&r.value),
                r.failures
            );
        }
        let _ = writeln!(
            out,
            "{:<14} {:>16} {:>16} {:>16}",
            "optimal",
            "",
            "",
            cell(&self.max_value)
        );
        if self.single_replication {
            let _ = writeln!(out, "note: single replication, spreads reported as 0");
        }
        out
    }

    /// `setting,estimator,metric,mean,se,failures` on the raw (unscaled) metric scale.
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["setting", "estimator", "metric", "mean", "se", "failures"])?;
        let setting = self.setting.number().to_string();
        for r in &self.rows {
            for (metric, s) in [("mse", r.mse), ("ar", r.ar), ("value", r.value)] {
                w.write_record([
                    setting.as_str(),
                    r.estimator.as_str(),
                    metric,
                    &s.mean.to_string(),
                    &s.spread.to_string(),
                    &r.failures.to_string(),
                ])?;
            }
        }
        w.write_record([
            setting.as_str(),
            "optimal",
            "value",
            &self.max_value.mean.to_string(),
            &self.max_value.spread.to_string(),
            "0",
        ])?;
        w.flush()?;
        Ok(())
    }

    /// One line per (replication, estimator, metric).
    pub fn write_long_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "setting",
            "replication",
            "estimator",
            "metric",
            "value",
            "error",
        ])?;
        let setting = self.setting.number().to_string();
        for rec in &self.records {
            let err = rec.error.clone().unwrap_or_default();
            for (metric, v) in [
                ("mse", rec.mse),
                ("ar", rec.ar),
                ("value", rec.value),
                ("max_value", rec.max_value),
            ] {
                w.write_record([
                    setting.as_str(),
                    &rec.replication.to_string(),
                    rec.estimator.as_str(),
                    metric,
                    &v.to_string(),
                    err.as_str(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn summarize(values: &[f64], kind: SpreadKind) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            spread: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Summary { mean, spread: 0.0 };
    }
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let spread = match kind {
        SpreadKind::StandardError => sd / (n as f64).sqrt(),
        SpreadKind::StandardDeviation => sd,
    };
    Summary { mean, spread }
}

/// Seeds of replication `r`: (training data, test covariates, nuisance/learner fits).
pub fn replication_seeds(master: u64, r: usize) -> (u64, u64, u64) {
    let s = derive_seed(master, r as u64);
    (derive_seed(s, 0), derive_seed(s, 1), derive_seed(s, 2))
}

fn estimator_labels(config: &SimulationConfig) -> Vec<String> {
    let mut labels: Vec<String> = config.estimators.iter().map(EstimatorSpec::label).collect();
    if config.include_wald {
        labels.push(WALD_LABEL.to_string());
    }
    labels
}

fn failed(r: usize, estimator: &str, max_value: f64, err: &Error) -> ReplicationRecord {
    ReplicationRecord {
        replication: r,
        estimator: estimator.to_string(),
        mse: f64::NAN,
        ar: f64::NAN,
        value: f64::NAN,
        max_value,
        nuisance_fingerprint: String::new(),
        error: Some(err.to_string()),
    }
}

/// Run one replication; failures are returned as records, never raised.
pub fn run_replication(
    config: &SimulationConfig,
    r: usize,
    shared_test: Option<&Covariates>,
) -> Vec<ReplicationRecord> {
    let truth = TrueModel::new(config.setting);
    let (train_seed, test_seed, fit_seed) = replication_seeds(config.master_seed, r);
    let drawn;
    let test_x = match shared_test {
        Some(x) => x,
        None => {
            drawn = sample_covariates(config.n_test, test_seed);
            &drawn
        }
    };
    let best = max_value(&truth, test_x);
    let labels = estimator_labels(config);

    let prepared =
        generate_dataset(config.setting, config.n_train, train_seed).and_then(|(data, _)| {
            let opts = NuisanceOptions {
                seed: fit_seed,
                ..config.nuisance
            };
            let set = NuisanceSet::fit(&data, &opts)?;
            let set =
                inject_misspecification(&set, &config.misspecification, &data, config.setting)?;
            Ok((data, set))
        });
    let (data, nuisances) = match prepared {
        Ok(v) => v,
        Err(e) => return labels.iter().map(|l| failed(r, l, best, &e)).collect(),
    };

    let evaluate = |label: &str, model: &dyn CatePredictor| -> ReplicationRecord {
        match predictions(model, test_x) {
            Ok(pred) => {
                let Metrics { mse, ar, value } = Metrics::from_predictions(&pred, &truth, test_x);
                ReplicationRecord {
                    replication: r,
                    estimator: label.to_string(),
                    mse,
                    ar,
                    value,
                    max_value: best,
                    nuisance_fingerprint: nuisances.fingerprint().to_string(),
                    error: None,
                }
            }
            Err(e) => failed(r, label, best, &e),
        }
    };

    let mut records = Vec::with_capacity(labels.len());
    for spec in &config.estimators {
        let spec = with_fit_seed(spec, fit_seed);
        match fit_cate(&data, &nuisances, &spec) {
            Ok(model) => records.push(evaluate(&spec.label(), &model)),
            Err(e) => records.push(failed(r, &spec.label(), best, &e)),
        }
    }
    if config.include_wald {
        records.push(evaluate(
            WALD_LABEL,
            &WaldBaseline {
                nuisances: &nuisances,
            },
        ));
    }
    records
}

fn with_fit_seed(spec: &EstimatorSpec, seed: u64) -> EstimatorSpec {
    let mut spec = spec.clone();
    if let Learner::Krr(opts) = &spec.learner {
        spec.learner = Learner::Krr(KrrOptions {
            seed,
            ..opts.clone()
        });
    }
    spec
}

/// All replications, aggregated. Output depends only on the config, never on `workers`.
pub fn run_replications(config: &SimulationConfig, workers: Workers) -> Result<MetricsTable> {
    config.validate()?;
    let shared_test = (!config.redraw_test)
        .then(|| sample_covariates(config.n_test, derive_seed(config.master_seed, u64::MAX)));
    let per_rep = map_indexed(config.replications, workers, |r| {
        let records = run_replication(config, r, shared_test.as_ref());
        log::debug!("replication {r} done");
        records
    });
    let records: Vec<ReplicationRecord> = per_rep.into_iter().flatten().collect();
    Ok(aggregate(config, records))
}

pub fn aggregate(config: &SimulationConfig, records: Vec<ReplicationRecord>) -> MetricsTable {
    let mut rows = Vec::new();
    for label in estimator_labels(config) {
        let ok: Vec<&ReplicationRecord> = records
            .iter()
            .filter(|r| r.estimator == label && r.error.is_none())
            .collect();
        let failures = records
            .iter()
            .filter(|r| r.estimator == label && r.error.is_some())
            .count();
        if failures > 0 {
            log::warn!(
                "{label}: {failures} of {} replications failed and were excluded",
                config.replications
            );
        }
        let column =
            |f: fn(&ReplicationRecord) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r)).collect() };
        rows.push(MetricsRow {
            estimator: label,
            mse: summarize(&column(|r| r.mse), config.spread),
            ar: summarize(&column(|r| r.ar), config.spread),
            value: summarize(&column(|r| r.value), config.spread),
            successes: ok.len(),
            failures,
        });
    }
    let mut maxima: Vec<(usize, f64)> = records
        .iter()
        .map(|r| (r.replication, r.max_value))
        .collect();
    maxima.dedup_by_key(|(r, _)| *r);
    let maxima: Vec<f64> = maxima.into_iter().map(|(_, v)| v).collect();
    MetricsTable {
        setting: config.setting,
        replications: config.replications,
        spread: config.spread,
        rows,
        max_value: summarize(&maxima, config.spread),
        single_replication: config.replications == 1,
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Shifted(TrueModel, f64);

    impl CatePredictor for Shifted {
        fn predict(&self, x: &[f64]) -> Result<f64> {
            Ok(self.0.cate(x) + self.1)
        }
    }

    struct Scaled(TrueModel, f64);

    impl CatePredictor for Scaled {
        fn predict(&self, x: &[f64]) -> Result<f64> {
            Ok(self.1 * self.0.cate(x))
        }
    }

    struct Constant(f64);

    impl CatePredictor for Constant {
        fn predict(&self, _: &[f64]) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn metrics_of_exact_and_shifted_models() {
        let truth = TrueModel::new(SettingId::Setting1);
        let x = sample_covariates(2000, 1);
        let exact = Shifted(truth, 0.0);
        assert_eq!(metric_mse(&exact, &truth, &x).unwrap(), 0.0);
        assert_eq!(metric_ar(&exact, &truth, &x).unwrap(), 1.0);
        assert_eq!(
            metric_value(&exact, &truth, &x).unwrap(),
            max_value(&truth, &x)
        );
        let off = metric_mse(&Shifted(truth, 0.1), &truth, &x).unwrap();
        assert!((off - 0.01).abs() < 1e-12);
        assert_eq!(metric_ar(&Scaled(truth, -1.0), &truth, &x).unwrap(), 0.0);
    }

    #[test]
    fn opposite_constant_regimes_average_to_main_effect() {
        let truth = TrueModel::new(SettingId::Setting2);
        let x = sample_covariates(1000, 2);
        let plus = metric_value(&Constant(1.0), &truth, &x).unwrap();
        let minus = metric_value(&Constant(-1.0), &truth, &x).unwrap();
        let mean_h = x.rows().map(|r| truth.h(r)).sum::<f64>() / 1000.0;
        assert!((0.5 * (plus + minus) - mean_h).abs() < 1e-12);
    }

    #[test]
    fn summary_spreads() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0], SpreadKind::StandardError);
        assert_eq!(s.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((s.spread - sd / 2.0).abs() < 1e-15);
        assert!(
            (summarize(&[1.0, 2.0, 3.0, 4.0], SpreadKind::StandardDeviation).spread - sd).abs()
                < 1e-15
        );
        assert_eq!(
            summarize(&[7.0], SpreadKind::StandardError),
            Summary {
                mean: 7.0,
                spread: 0.0
            }
        );
    }

    #[test]
    fn flags_need_covariate_instrument() {
        let mut config = SimulationConfig::new(SettingId::Setting1, Learner::linear());
        config
            .misspecification
            .insert(Misspecification::WrongPropensityHalf);
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        config.setting = SettingId::Setting4;
        assert!(config.validate().is_ok());
        config.replications = 0;
        assert!(config.validate().is_err());
    }
}
