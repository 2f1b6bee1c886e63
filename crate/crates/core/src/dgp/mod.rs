//! Synthetic data for the four simulation settings, with oracle access to the
//! generating process.
//!
//! All settings share `X ~ U(-1, 1)^5`, a Bridge(1/2) confounder `U`, and the
//! treatment model `P(A = 1 | X, Z, U) = expit(2 x1 + 2.5 z - 0.5 u)`. They differ
//! in the instrument propensity and in the outcome model:
//!
//! | setting | `P(Z = 1 | x)` | outcome |
//! |---|---|---|
//! | 1, 3, 4 | 1/2 (1), `expit(2 x1)` (3, 4) | `h(x) + q(x) a + 0.5 u + eps` |
//! | 2 | 1/2 | `h(x) + (exp(q(x)) - 1) a + u + eps` |

pub mod bridge;
pub mod quadrature;

pub use bridge::sample as sample_bridge;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, ObservedDataset};
use crate::error::{Error, Result};

pub const NUM_COVARIATES: usize = 5;
pub const BRIDGE_PHI: f64 = 0.5;
const TREAT_X1: f64 = 2.0;
const TREAT_Z: f64 = 2.5;
const TREAT_U: f64 = -0.5;
const MAIN_EFFECT: [f64; 6] = [0.5, 0.5, 0.8, 0.3, -0.5, 0.7];
const EFFECT_MODIFIER: [f64; 3] = [0.2, -0.6, -0.8];
/// Integration window for the confounder; tails beyond it carry < 1e-12 mass.
const U_WINDOW: [f64; 13] = [
    -60.0, -45.0, -30.0, -20.0, -12.0, -6.0, 0.0, 6.0, 12.0, 20.0, 30.0, 45.0, 60.0,
];
pub const QUADRATURE_TOL: f64 = 1e-8;

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SettingId {
    Setting1,
    Setting2,
    Setting3,
    Setting4,
}

impl SettingId {
    pub const ALL: [SettingId; 4] = [
        SettingId::Setting1,
        SettingId::Setting2,
        SettingId::Setting3,
        SettingId::Setting4,
    ];

    pub fn number(self) -> u8 {
        match self {
            SettingId::Setting1 => 1,
            SettingId::Setting2 => 2,
            SettingId::Setting3 => 3,
            SettingId::Setting4 => 4,
        }
    }

    /// Settings 3 and 4 use the covariate-dependent instrument `expit(2 x1)`.
    pub fn has_covariate_instrument(self) -> bool {
        matches!(self, SettingId::Setting3 | SettingId::Setting4)
    }

    pub fn is_exponential(self) -> bool {
        matches!(self, SettingId::Setting2)
    }

    fn confounder_loading(self) -> f64 {
        if self.is_exponential() {
            1.0
        } else {
            0.5
        }
    }
}

impl fmt::Display for SettingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for SettingId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().trim_start_matches("setting") {
            "1" => Ok(SettingId::Setting1),
            "2" => Ok(SettingId::Setting2),
            "3" => Ok(SettingId::Setting3),
            "4" => Ok(SettingId::Setting4),
            other => Err(Error::Config(format!(
                "unknown setting '{other}' (expected 1-4)"
            ))),
        }
    }
}

/// Unobserved draws behind one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub u: f64,
    pub eps: f64,
}

/// Oracle view of a setting's data-generating process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrueModel {
    pub setting: SettingId,
}

impl TrueModel {
    pub fn new(setting: SettingId) -> Self {
        Self { setting }
    }

    /// Main effect `h(x)`.
    pub fn h(&self, x: &[f64]) -> f64 {
        MAIN_EFFECT[0]
            + x.iter()
                .zip(&MAIN_EFFECT[1..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    pub fn q(&self, x: &[f64]) -> f64 {
        EFFECT_MODIFIER[0] + EFFECT_MODIFIER[1] * x[0] + EFFECT_MODIFIER[2] * x[1]
    }

    /// Coefficient on `a` in the outcome model; half the CATE.
    pub fn treatment_loading(&self, x: &[f64]) -> f64 {
        if self.setting.is_exponential() {
            self.q(x).exp() - 1.0
        } else {
            self.q(x)
        }
    }

    pub fn cate(&self, x: &[f64]) -> f64 {
        2.0 * self.treatment_loading(x)
    }

    /// Optimal regime `sign(cate(x))` with `sign(0) = +1`.
    pub fn optimal_regime(&self, x: &[f64]) -> i8 {
        if self.cate(x) >= 0.0 {
            1
        } else {
            -1
        }
    }

    /// `P(Z = +1 | x)`.
    pub fn pi_z(&self, x: &[f64]) -> f64 {
        if self.setting.has_covariate_instrument() {
            expit(2.0 * x[0])
        } else {
            0.5
        }
    }

    /// `P(A = +1 | X = x, Z = z, U = u)`.
    pub fn treatment_probability(&self, x: &[f64], z: i8, u: f64) -> f64 {
        expit(TREAT_X1 * x[0] + TREAT_Z * f64::from(z) + TREAT_U * u)
    }

    /// `P(A = +1 | X = x, Z = z)`, integrating the confounder out by adaptive quadrature.
    pub fn marginal_p_a(&self, x: &[f64], z: i8) -> Result<f64> {
        let eta = TREAT_X1 * x[0] + TREAT_Z * f64::from(z);
        quadrature::integrate_panels(
            |u| expit(eta + TREAT_U * u) * bridge::density_unchecked(BRIDGE_PHI, u),
            &U_WINDOW,
            QUADRATURE_TOL,
        )
    }

    /// `E[A | Z = z, X = x]` on the -1/+1 coding.
    pub fn mean_treatment(&self, x: &[f64], z: i8) -> Result<f64> {
        Ok(2.0 * self.marginal_p_a(x, z)? - 1.0)
    }

    /// `E[Y | Z = z, X = x]`; the confounder has mean zero given `x` and is
    /// independent of `z`.
    pub fn mean_outcome(&self, x: &[f64], z: i8) -> Result<f64> {
        Ok(self.h(x) + self.treatment_loading(x) * self.mean_treatment(x, z)?)
    }

    /// `delta(x) = P(A = 1 | Z = 1, x) - P(A = 1 | Z = -1, x)`.
    pub fn delta(&self, x: &[f64]) -> Result<f64> {
        Ok(self.marginal_p_a(x, 1)? - self.marginal_p_a(x, -1)?)
    }

    /// Outcome for given covariates, treatment and latent draws.
    pub fn outcome(&self, x: &[f64], a: i8, latent: LatentRecord) -> f64 {
        self.h(x)
            + self.treatment_loading(x) * f64::from(a)
            + self.setting.confounder_loading() * latent.u
            + latent.eps
    }
}

/// Wrapper so [`marginal_treatment_probability`] reads like the other oracle calls.
pub fn marginal_treatment_probability(truth: &TrueModel, x: &[f64], z: i8) -> Result<f64> {
    truth.marginal_p_a(x, z)
}

pub fn oracle_cate(truth: &TrueModel, x: &[f64]) -> f64 {
    truth.cate(x)
}

/// Value `E[Y(d(X))]` of a regime, averaged over the rows of `test_x`.
pub fn oracle_value<F: Fn(&[f64]) -> i8>(truth: &TrueModel, regime: F, test_x: &Covariates) -> f64 {
    let n = test_x.nrows();
    if n == 0 {
        return f64::NAN;
    }
    test_x
        .rows()
        .map(|x| truth.h(x) + truth.treatment_loading(x) * f64::from(regime(x)))
        .sum::<f64>()
        / n as f64
}

/// Covariates only: `n` iid rows from `U(-1, 1)^5`.
pub fn sample_covariates(n: usize, seed: u64) -> Covariates {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * NUM_COVARIATES)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Covariates::from_row_major(NUM_COVARIATES, data).expect("fixed width")
}

/// Draw `n` records. Bit-reproducible given `(setting, n, seed)`.
pub fn generate_dataset(
    setting: SettingId,
    n: usize,
    seed: u64,
) -> Result<(ObservedDataset, Vec<LatentRecord>)> {
    if n == 0 {
        return Err(Error::InvalidInput("sample size must be at least 1".into()));
    }
    let truth = TrueModel::new(setting);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n * NUM_COVARIATES);
    let (mut y, mut a, mut z) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut latent = Vec::with_capacity(n);
    let mut x = [0.0; NUM_COVARIATES];
    for _ in 0..n {
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let zi: i8 = if rng.random::<f64>() < truth.pi_z(&x) {
            1
        } else {
            -1
        };
        let u = bridge::quantile_unchecked(BRIDGE_PHI, rng.sample(Open01));
        let ai: i8 = if rng.random::<f64>() < truth.treatment_probability(&x, zi, u) {
            1
        } else {
            -1
        };
        let eps: f64 = rng.sample(StandardNormal);
        let rec = LatentRecord { u, eps };
        y.push(truth.outcome(&x, ai, rec));
        xs.extend_from_slice(&x);
        a.push(ai);
        z.push(zi);
        latent.push(rec);
    }
    let data = ObservedDataset::new(y, Covariates::from_row_major(NUM_COVARIATES, xs)?, a, z)?;
    Ok((data, latent))
}

/// Sidecar CSV with header `u,eps`.
pub fn write_latent_csv<W: Write>(latent: &[LatentRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["u", "eps"])?;
    for rec in latent {
        w.write_record([rec.u.to_string(), rec.eps.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cate_examples() {
        let zero = [0.0; 5];
        assert!((oracle_cate(&TrueModel::new(SettingId::Setting1), &zero) - 0.4).abs() < 1e-15);
        let root = [1.0 / 3.0, 0.0, 0.3, -0.2, 0.9];
        assert!(oracle_cate(&TrueModel::new(SettingId::Setting1), &root).abs() < 1e-15);
        let s2 = oracle_cate(&TrueModel::new(SettingId::Setting2), &zero);
        assert!((s2 - 2.0 * (0.2f64.exp() - 1.0)).abs() < 1e-15);
        assert!((s2 - 0.44281).abs() < 1e-5);
        assert_eq!(
            oracle_cate(&TrueModel::new(SettingId::Setting3), &root),
            oracle_cate(&TrueModel::new(SettingId::Setting1), &root)
        );
    }

    #[test]
    fn outcome_reconstructs_exactly() {
        for setting in SettingId::ALL {
            let truth = TrueModel::new(setting);
            let (data, latent) = generate_dataset(setting, 300, 11).unwrap();
            for (i, l) in latent.iter().enumerate() {
                let x = data.x().row(i);
                let expected = if setting.is_exponential() {
                    truth.h(x) + (truth.q(x).exp() - 1.0) * f64::from(data.a()[i]) + l.u + l.eps
                } else {
                    truth.h(x) + truth.q(x) * f64::from(data.a()[i]) + 0.5 * l.u + l.eps
                };
                assert_eq!(data.y()[i], expected);
            }
        }
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let (a, la) = generate_dataset(SettingId::Setting2, 50, 3).unwrap();
        let (b, lb) = generate_dataset(SettingId::Setting2, 50, 3).unwrap();
        let (c, _) = generate_dataset(SettingId::Setting2, 50, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_ne!(a, c);
        assert!(generate_dataset(SettingId::Setting1, 0, 3).is_err());
    }

    #[test]
    fn constant_regimes_average_to_main_effect() {
        let truth = TrueModel::new(SettingId::Setting2);
        let test_x = sample_covariates(1000, 5);
        let plus = oracle_value(&truth, |_| 1, &test_x);
        let minus = oracle_value(&truth, |_| -1, &test_x);
        let mean_h = test_x.rows().map(|x| truth.h(x)).sum::<f64>() / 1000.0;
        assert!(((plus + minus) / 2.0 - mean_h).abs() < 1e-12);
    }

    #[test]
    fn marginal_probability_symmetry_and_monotonicity() {
        let truth = TrueModel::new(SettingId::Setting1);
        let x = [0.0, 0.4, -0.2, 0.1, 0.9];
        let p_pos = marginal_treatment_probability(&truth, &x, 1).unwrap();
        let p_neg = marginal_treatment_probability(&truth, &x, -1).unwrap();
        assert!((0.5 * (p_pos + p_neg) - 0.5).abs() < 1e-9);
        assert!(p_pos > p_neg);
        assert!(p_pos < 1.0 && p_neg > 0.0);
    }

    #[test]
    fn setting_parse_and_display() {
        assert_eq!(
            "setting3".parse::<SettingId>().unwrap(),
            SettingId::Setting3
        );
        assert_eq!("2".parse::<SettingId>().unwrap(), SettingId::Setting2);
        assert!("5".parse::<SettingId>().is_err());
        assert_eq!(SettingId::Setting4.to_string(), "4");
    }

    #[test]
    fn latent_sidecar_header() {
        let mut buf = Vec::new();
        write_latent_csv(&[LatentRecord { u: 0.5, eps: -1.0 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "u,eps\n0.5,-1\n");
    }
}
