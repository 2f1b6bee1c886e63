//! The `simulate` run configuration: a TOML document with one section per module.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ivcate::dgp::SettingId;
use ivcate::estimator::{
    KrrOptions, KrrPenalty, LassoPenalty, Learner, Method, DEFAULT_MAX_ANCHORS,
};
use ivcate::evaluation::{Misspecification, SimulationConfig, SpreadKind};
use ivcate::learners::{Bandwidth, ForestParams, LassoCvOptions};
use ivcate::nuisance::{
    DeltaLearner, MeanLearner, NuisanceOptions, PropensityLearner, DEFAULT_DELTA_FLOOR,
    DEFAULT_PI_CLIP, NUISANCE_MIN_LEAF,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Every key, its default and its meaning. Printed by `simulate --help`.
pub const CONFIG_HELP: &str = "\
CONFIG FILE (TOML; unknown keys are errors; every key is optional)

[simulation]
  setting = 1                   data-generating setting, 1 to 4
  n_train = 500                 training rows per replication
  n_test = 5000                 test rows used for MSE, AR and Value
  replications = 100            Monte Carlo replications, at least 1
  seed = 0                      master seed; --seed overrides it
  redraw_test = true            fresh test sample per replication
  include_wald = true           also report the plug-in Wald ratio
  spread = \"standard_error\"     or \"standard_deviation\"
  misspecification = []         \"wrong_propensity_half\", \"ols_g_star\" (settings 3, 4)

[estimator]
  methods = [\"ivdl\", \"ivrdl1\", \"ivrdl2\"]
                                ivrdl2 uses h3; ivrdl2-h1 and ivrdl2-h2 also accepted
  learner = \"linear\"            \"linear\", \"lasso\" or \"krr\"
  ridge = 0.0                   linear: ridge on the slopes
  lasso_lambda                  lasso: fixed penalty; unset means cross-validation
  lasso_cv_lambdas = 50         lasso: grid size
  lasso_cv_decades = 2.0        lasso: grid spans this many decades below lambda_max
  lasso_cv_folds = 5            lasso: CV folds
  krr_penalty                   krr: fixed penalty; unset means cross-validation
  krr_penalty_grid = [0.001, 0.00316, 0.01, 0.0316, 0.1, 0.316, 1.0]
                                krr: CV grid (default 10^-3 to 10^0, half decades)
  krr_cv_folds = 5              krr: CV folds
  krr_bandwidth                 krr: Gaussian bandwidth; unset means median heuristic
  krr_max_anchors = 4000        krr: subsample anchors above this many rows

[nuisance]
  propensity = \"logistic\"       \"known_half\", \"logistic\" or \"forest\"
  delta = \"forest\"              \"forest\" or \"logistic\"
  means = \"forest\"              \"forest\" or \"ols\"
  pi_clip = 0.01                instrument propensity clipped to [clip, 1 - clip]
  delta_floor = 0.05            |delta| floored here, sign kept
  out_of_bag = true             forest values at training rows are out-of-bag
  cross_fit_folds = 0           K-fold cross-fitting; 0 disables it
  num_trees = 500               trees per nuisance forest
  min_leaf = 20                 minimum rows per forest leaf
  mtry                          features tried per split; unset means ceil(p / 3)
  max_depth                     unset means unlimited
  bootstrap = true              bootstrap rows for each tree

[output]
  dir                           output directory; --out overrides it
";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub simulation: SimulationSection,
    pub estimator: EstimatorSection,
    pub nuisance: NuisanceSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub setting: u8,
    pub n_train: usize,
    pub n_test: usize,
    pub replications: usize,
    pub seed: u64,
    pub redraw_test: bool,
    pub include_wald: bool,
    pub spread: SpreadKind,
    pub misspecification: Vec<Misspecification>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            setting: 1,
            n_train: 500,
            n_test: 5000,
            replications: 100,
            seed: 0,
            redraw_test: true,
            include_wald: true,
            spread: SpreadKind::StandardError,
            misspecification: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub methods: Vec<String>,
    pub learner: String,
    pub ridge: f64,
    pub lasso_lambda: Option<f64>,
    pub lasso_cv_lambdas: usize,
    pub lasso_cv_decades: f64,
    pub lasso_cv_folds: usize,
    pub krr_penalty: Option<f64>,
    pub krr_penalty_grid: Vec<f64>,
    pub krr_cv_folds: usize,
    pub krr_bandwidth: Option<f64>,
    pub krr_max_anchors: usize,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let cv = LassoCvOptions::default();
        let KrrPenalty::Cv { grid, folds } = KrrPenalty::default() else {
            unreachable!("default KRR penalty is CV")
        };
        Self {
            methods: ["ivdl", "ivrdl1", "ivrdl2"].map(String::from).to_vec(),
            learner: "linear".into(),
            ridge: 0.0,
            lasso_lambda: None,
            lasso_cv_lambdas: cv.num_lambdas,
            lasso_cv_decades: cv.decades,
            lasso_cv_folds: cv.folds,
            krr_penalty: None,
            krr_penalty_grid: grid,
            krr_cv_folds: folds,
            krr_bandwidth: None,
            krr_max_anchors: DEFAULT_MAX_ANCHORS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NuisanceSection {
    pub propensity: PropensityLearner,
    pub delta: DeltaLearner,
    pub means: MeanLearner,
    pub pi_clip: f64,
    pub delta_floor: f64,
    pub out_of_bag: bool,
    pub cross_fit_folds: usize,
    pub num_trees: usize,
    pub min_leaf: usize,
    pub mtry: Option<usize>,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
}

impl Default for NuisanceSection {
    fn default() -> Self {
        let forest = ForestParams::default();
        Self {
            propensity: PropensityLearner::Logistic,
            delta: DeltaLearner::Forest,
            means: MeanLearner::Forest,
            pi_clip: DEFAULT_PI_CLIP,
            delta_floor: DEFAULT_DELTA_FLOOR,
            out_of_bag: true,
            cross_fit_folds: 0,
            num_trees: forest.num_trees,
            min_leaf: NUISANCE_MIN_LEAF,
            mtry: None,
            max_depth: None,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// A config problem tied to a key; rendered with the key's line when it appears in the file.
struct KeyError {
    section: &'static str,
    key: &'static str,
    message: String,
}

fn key_error(section: &'static str, key: &'static str, message: impl Into<String>) -> KeyError {
    KeyError {
        section,
        key,
        message: message.into(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("{}: cannot read config: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parse and check `text`; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start)).unwrap_or(1);
            CliError::input(format!("{origin}:{line}: {}", e.message().trim_end()))
        })?;
        if let Err(e) = config.to_simulation() {
            let line = locate_key(text, e.section, e.key).unwrap_or(1);
            return Err(CliError::input(format!(
                "{origin}:{line}: {}.{}: {}",
                e.section, e.key, e.message
            )));
        }
        Ok(config)
    }

    pub fn simulation_config(&self) -> CliResult<SimulationConfig> {
        self.to_simulation()
            .map_err(|e| CliError::input(format!("{}.{}: {}", e.section, e.key, e.message)))
    }

    fn to_simulation(&self) -> Result<SimulationConfig, KeyError> {
        let sim = &self.simulation;
        let setting: SettingId = sim.setting.to_string().parse().map_err(|_| {
            key_error(
                "simulation",
                "setting",
                format!("expected 1 to 4, got {}", sim.setting),
            )
        })?;
        if sim.replications == 0 {
            return Err(key_error(
                "simulation",
                "replications",
                "must be at least 1, got 0",
            ));
        }
        if sim.n_train < 2 {
            return Err(key_error(
                "simulation",
                "n_train",
                format!("must be at least 2, got {}", sim.n_train),
            ));
        }
        if sim.n_test == 0 {
            return Err(key_error(
                "simulation",
                "n_test",
                "must be at least 1, got 0",
            ));
        }
        let flags: BTreeSet<Misspecification> = sim.misspecification.iter().copied().collect();
        if !flags.is_empty() && !setting.has_covariate_instrument() {
            return Err(key_error(
                "simulation",
                "misspecification",
                format!(
                    "needs setting 3 or 4 (covariate-dependent instrument), got setting {setting}"
                ),
            ));
        }

        let learner = self.estimator.learner()?;
        let methods = self
            .estimator
            .methods
            .iter()
            .map(|m| {
                m.parse::<Method>()
                    .map_err(|e| key_error("estimator", "methods", e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if methods.is_empty() && !sim.include_wald {
            return Err(key_error(
                "estimator",
                "methods",
                "empty, and include_wald is false",
            ));
        }

        let mut config = SimulationConfig::new(setting, learner.clone());
        config.n_train = sim.n_train;
        config.n_test = sim.n_test;
        config.replications = sim.replications;
        config.master_seed = sim.seed;
        config.redraw_test = sim.redraw_test;
        config.include_wald = sim.include_wald;
        config.spread = sim.spread;
        config.misspecification = flags;
        config.estimators = methods
            .into_iter()
            .map(|m| ivcate::estimator::EstimatorSpec::new(m, learner.clone()))
            .collect();
        config.nuisance = self.nuisance.options()?;
        config
            .validate()
            .map_err(|e| key_error("simulation", "setting", e.to_string()))?;
        Ok(config)
    }
}

impl EstimatorSection {
    fn learner(&self) -> Result<Learner, KeyError> {
        match self.learner.as_str() {
            "linear" => {
                if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
                    return Err(key_error(
                        "estimator",
                        "ridge",
                        format!("must be finite and >= 0, got {}", self.ridge),
                    ));
                }
                Ok(Learner::Linear { ridge: self.ridge })
            }
            "lasso" => match self.lasso_lambda {
                Some(l) if !(l >= 0.0 && l.is_finite()) => Err(key_error(
                    "estimator",
                    "lasso_lambda",
                    format!("must be finite and >= 0, got {l}"),
                )),
                Some(l) => Ok(Learner::Lasso(LassoPenalty::Fixed(l))),
                None => {
                    if self.lasso_cv_folds < 2 {
                        return Err(key_error(
                            "estimator",
                            "lasso_cv_folds",
                            "must be at least 2",
                        ));
                    }
                    if self.lasso_cv_lambdas == 0 {
                        return Err(key_error(
                            "estimator",
                            "lasso_cv_lambdas",
                            "must be at least 1",
                        ));
                    }
                    if !(self.lasso_cv_decades > 0.0 && self.lasso_cv_decades.is_finite()) {
                        return Err(key_error(
                            "estimator",
                            "lasso_cv_decades",
                            "must be positive",
                        ));
                    }
                    Ok(Learner::Lasso(LassoPenalty::Cv(LassoCvOptions {
                        num_lambdas: self.lasso_cv_lambdas,
                        decades: self.lasso_cv_decades,
                        folds: self.lasso_cv_folds,
                    })))
                }
            },
            "krr" => {
                let penalty = match self.krr_penalty {
                    Some(p) if !(p > 0.0 && p.is_finite()) => {
                        return Err(key_error(
                            "estimator",
                            "krr_penalty",
                            format!("must be positive, got {p}"),
                        ))
                    }
                    Some(p) => KrrPenalty::Fixed(p),
                    None => {
                        if self.krr_penalty_grid.is_empty()
                            || self
                                .krr_penalty_grid
                                .iter()
                                .any(|p| !p.is_finite() || *p <= 0.0)
                        {
                            return Err(key_error(
                                "estimator",
                                "krr_penalty_grid",
                                "must hold positive values",
                            ));
                        }
                        if self.krr_cv_folds < 2 {
                            return Err(key_error(
                                "estimator",
                                "krr_cv_folds",
                                "must be at least 2",
                            ));
                        }
                        KrrPenalty::Cv {
                            grid: self.krr_penalty_grid.clone(),
                            folds: self.krr_cv_folds,
                        }
                    }
                };
                let bandwidth = match self.krr_bandwidth {
                    Some(b) if !(b > 0.0 && b.is_finite()) => {
                        return Err(key_error(
                            "estimator",
                            "krr_bandwidth",
                            format!("must be positive, got {b}"),
                        ))
                    }
                    Some(b) => Bandwidth::Fixed(b),
                    None => Bandwidth::Median,
                };
                if self.krr_max_anchors == 0 {
                    return Err(key_error(
                        "estimator",
                        "krr_max_anchors",
                        "must be at least 1",
                    ));
                }
                Ok(Learner::Krr(KrrOptions {
                    penalty,
                    bandwidth,
                    max_anchors: self.krr_max_anchors,
                    seed: 0,
                }))
            }
            other => Err(key_error(
                "estimator",
                "learner",
                format!("expected linear, lasso or krr, got '{other}'"),
            )),
        }
    }
}

impl NuisanceSection {
    fn options(&self) -> Result<NuisanceOptions, KeyError> {
        if !(0.0..0.5).contains(&self.pi_clip) {
            return Err(key_error(
                "nuisance",
                "pi_clip",
                format!("must lie in [0, 0.5), got {}", self.pi_clip),
            ));
        }
        if !(self.delta_floor > 0.0 && self.delta_floor <= 1.0) {
            return Err(key_error(
                "nuisance",
                "delta_floor",
                format!("must lie in (0, 1], got {}", self.delta_floor),
            ));
        }
        if self.num_trees == 0 {
            return Err(key_error("nuisance", "num_trees", "must be at least 1"));
        }
        if self.min_leaf == 0 {
            return Err(key_error("nuisance", "min_leaf", "must be at least 1"));
        }
        if self.mtry == Some(0) {
            return Err(key_error("nuisance", "mtry", "must be at least 1"));
        }
        if self.cross_fit_folds == 1 {
            return Err(key_error(
                "nuisance",
                "cross_fit_folds",
                "must be 0 (off) or at least 2",
            ));
        }
        let opts = NuisanceOptions {
            propensity: self.propensity,
            delta: self.delta,
            means: self.means,
            forest: ForestParams {
                num_trees: self.num_trees,
                mtry: self.mtry,
                min_leaf: self.min_leaf,
                max_depth: self.max_depth,
                bootstrap: self.bootstrap,
                seed: 0,
            },
            pi_clip: self.pi_clip,
            delta_floor: self.delta_floor,
            out_of_bag: self.out_of_bag,
            cross_fit_folds: self.cross_fit_folds,
            seed: 0,
        };
        opts.validate()
            .map_err(|e| key_error("nuisance", "pi_clip", e.to_string()))?;
        Ok(opts)
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line of `key = ...` inside `[section]`, if the file sets it.
fn locate_key(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line
                .trim_matches(|c| c == '[' || c == ']')
                .trim()
                .to_string();
            continue;
        }
        let Some((k, _)) = line.split_once('=') else {
            continue;
        };
        let k = k.trim();
        if (current == section && k == key)
            || (current.is_empty() && k == format!("{section}.{key}"))
        {
            return Some(i + 1);
        }
    }
    text.lines()
        .position(|l| l.trim().trim_matches(|c| c == '[' || c == ']').trim() == section)
        .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::parse("", "t").unwrap();
        assert_eq!(c, RunConfig::default());
        let sim = c.simulation_config().unwrap();
        assert_eq!(
            (sim.n_train, sim.n_test, sim.replications),
            (500, 5000, 100)
        );
        assert_eq!(sim.estimators.len(), 3);
        assert_eq!(sim.nuisance, NuisanceOptions::default());
    }

    #[test]
    fn zero_replications_points_at_its_line() {
        let text = "[simulation]\nsetting = 1\n\nreplications = 0\n";
        let err = RunConfig::parse(text, "cfg.toml").unwrap_err();
        assert_eq!(err.code(), 2);
        assert!(err.message.starts_with("cfg.toml:4:"), "{}", err.message);
        assert!(err.message.contains("replications"));
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let err = RunConfig::parse("[nuisance]\nnum_trees = 10\nnum_treez = 3\n", "c").unwrap_err();
        assert!(err.message.starts_with("c:3:"), "{}", err.message);
        assert!(err.message.contains("num_treez"));
        assert!(RunConfig::parse("[outputs]\n", "c").is_err());
    }

    #[test]
    fn type_errors_carry_a_line() {
        let err = RunConfig::parse("[simulation]\n\nn_train = \"many\"\n", "c").unwrap_err();
        assert!(err.message.starts_with("c:3:"), "{}", err.message);
    }

    #[test]
    fn flags_need_a_covariate_instrument() {
        let err = RunConfig::parse("[simulation]\nmisspecification = [\"ols_g_star\"]\n", "c")
            .unwrap_err();
        assert!(
            err.message.starts_with("c:2:") && err.message.contains("misspecification"),
            "{}",
            err.message
        );
        let ok = RunConfig::parse(
            "[simulation]\nsetting = 4\nmisspecification = [\"wrong_propensity_half\"]\n",
            "c",
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn help_lists_every_key() {
        let value = toml::Value::try_from(RunConfig::default()).unwrap();
        for (section, table) in value.as_table().unwrap() {
            assert!(CONFIG_HELP.contains(&format!("[{section}]")), "{section}");
            for key in table.as_table().unwrap().keys() {
                assert!(
                    CONFIG_HELP.contains(&format!("\n  {key}")),
                    "{section}.{key} missing from help"
                );
            }
        }
        for key in [
            "lasso_lambda",
            "krr_penalty ",
            "krr_bandwidth",
            "mtry",
            "max_depth",
            "dir",
        ] {
            assert!(CONFIG_HELP.contains(&format!("\n  {key}")), "{key}");
        }
    }

    #[test]
    fn learners_map_through() {
        let c =
            RunConfig::parse("[estimator]\nlearner = \"krr\"\nkrr_penalty = 0.1\n", "c").unwrap();
        let sim = c.simulation_config().unwrap();
        assert!(
            matches!(&sim.estimators[0].learner, Learner::Krr(o) if o.penalty == KrrPenalty::Fixed(0.1))
        );
        assert!(RunConfig::parse("[estimator]\nlearner = \"svm\"\n", "c")
            .unwrap_err()
            .message
            .contains("c:2:"));
        assert!(RunConfig::parse("[estimator]\nmethods = [\"ivrdl3\"]\n", "c").is_err());
    }
}
