//! Bagged CART regression forest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::{Columns, Grower, RegressionTree, TreeParams};
use crate::data::Covariates;
use crate::error::{Error, Result};
use crate::par::{derive_seed, map_indexed, Workers};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub num_trees: usize,
    /// Candidate features per split; `None` means `ceil(p / 3)`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    /// Bootstrap rows with replacement; otherwise every tree sees all rows.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            num_trees: 500,
            mtry: None,
            min_leaf: 5,
            max_depth: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn resolved_mtry(&self, p: usize) -> usize {
        self.mtry.unwrap_or(p.div_ceil(3)).clamp(1, p.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestFit {
    pub trees: Vec<RegressionTree>,
    pub params: ForestParams,
    /// Out-of-bag prediction for every training row (original order). Rows that
    /// were in every bootstrap sample fall back to the full-forest prediction.
    #[serde(skip)]
    pub oob: Vec<f64>,
}

impl ForestFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_many(&self, x: &Covariates) -> Vec<f64> {
        x.rows().map(|r| self.predict(r)).collect()
    }

    pub fn oob_predictions(&self) -> &[f64] {
        &self.oob
    }
}

/// Row order sorted by (covariates, target), so the fit does not depend on the
/// order rows arrive in.
fn canonical_order(x: &Covariates, targets: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b))
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or_else(|| targets[a].total_cmp(&targets[b]))
    });
    order
}

pub fn fit_forest(x: &Covariates, targets: &[f64], params: &ForestParams) -> Result<ForestFit> {
    let n = x.nrows();
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    if params.num_trees == 0 {
        return Err(Error::InvalidInput("forest needs at least one tree".into()));
    }
    if n < 2 * params.min_leaf.max(1) {
        return Err(Error::InvalidInput(format!(
            "{n} rows are too few for min_leaf {}",
            params.min_leaf
        )));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("forest targets must be finite".into()));
    }
    let order = canonical_order(x, targets);
    let canon_x = x.select_rows(&order);
    let canon_t: Vec<f64> = order.iter().map(|&i| targets[i]).collect();
    let columns = Columns::new(&canon_x);
    let tree_params = TreeParams {
        min_leaf: params.min_leaf,
        max_depth: params.max_depth,
        mtry: Some(params.resolved_mtry(x.ncols())),
    };

    let grown: Vec<(RegressionTree, Vec<bool>)> =
        map_indexed(params.num_trees, Workers::AUTO, |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, b as u64));
            let mut in_bag = vec![!params.bootstrap; n];
            let rows: Vec<usize> = if params.bootstrap {
                (0..n)
                    .map(|_| {
                        let i = rng.random_range(0..n);
                        in_bag[i] = true;
                        i
                    })
                    .collect()
            } else {
                (0..n).collect()
            };
            let tree = Grower {
                columns: &columns,
                targets: &canon_t,
                params: tree_params,
                rng: &mut rng,
            }
            .grow(rows);
            (tree, in_bag)
        });

    let mut oob_sum = vec![0.0; n];
    let mut oob_count = vec![0usize; n];
    for (tree, in_bag) in &grown {
        for (i, bagged) in in_bag.iter().enumerate() {
            if !bagged {
                oob_sum[i] += tree.predict(canon_x.row(i));
                oob_count[i] += 1;
            }
        }
    }
    let trees: Vec<RegressionTree> = grown.into_iter().map(|(t, _)| t).collect();
    let mut fit = ForestFit {
        trees,
        params: *params,
        oob: Vec::new(),
    };
    let mut oob = vec![0.0; n];
    for (c, &orig) in order.iter().enumerate() {
        oob[orig] = if oob_count[c] > 0 {
            oob_sum[c] / oob_count[c] as f64
        } else {
            fit.predict(canon_x.row(c))
        };
    }
    fit.oob = oob;
    Ok(fit)
}
