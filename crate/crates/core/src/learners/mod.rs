//! Supervised learners used for nuisance fitting and CATE regression.

pub mod forest;
pub mod krr;
pub mod lasso;
pub mod logistic;
pub mod tree;
pub mod wls;

pub use forest::{fit_forest, ForestFit, ForestParams};
pub use krr::{fit_krr_cv, fit_weighted_krr, Bandwidth, KernelFit};
pub use lasso::{fit_lasso_cv, fit_weighted_lasso, LassoCvOptions, LassoOptions};
pub use logistic::fit_logistic;
pub use tree::{fit_tree, LeafSummary, RegressionTree, TreeParams};
pub use wls::{solve_wls, LinearFit, WeightedRegressionProblem};
