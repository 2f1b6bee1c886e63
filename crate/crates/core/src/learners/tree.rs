//! CART regression trees (variance-reduction splits, mean leaves).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::Covariates;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    /// Candidate features per node; `None` uses all of them.
    pub mtry: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            min_leaf: 5,
            max_depth: None,
            mtry: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
        count: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    num_features: usize,
}

/// Leaf description for reporting: the path of conditions, the leaf mean and
/// the share of training rows it holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafSummary {
    pub conditions: Vec<Condition>,
    pub value: f64,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: usize,
    pub threshold: f64,
    /// `true` for `x[feature] <= threshold`.
    pub left: bool,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.leaf_of(x).0
    }

    /// (leaf value, node index)
    fn leaf_of(&self, x: &[f64]) -> (f64, usize) {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value, .. } => return (*value, idx),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    idx = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<LeafSummary> {
        let total = match &self.nodes[0] {
            Node::Leaf { count, .. } | Node::Split { count, .. } => *count,
        };
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((idx, path)) = stack.pop() {
            match &self.nodes[idx] {
                Node::Leaf { value, count } => out.push(LeafSummary {
                    conditions: path,
                    value: *value,
                    count: *count,
                    fraction: *count as f64 / total as f64,
                }),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    let mut rp = path.clone();
                    rp.push(Condition {
                        feature: *feature,
                        threshold: *threshold,
                        left: false,
                    });
                    stack.push((*right, rp));
                    let mut lp = path;
                    lp.push(Condition {
                        feature: *feature,
                        threshold: *threshold,
                        left: true,
                    });
                    stack.push((*left, lp));
                }
            }
        }
        out
    }

    /// Indented text rendering; `names[j]` labels feature `j`.
    pub fn render(&self, names: &[String]) -> String {
        let total = match &self.nodes[0] {
            Node::Leaf { count, .. } | Node::Split { count, .. } => *count as f64,
        };
        let mut out = String::new();
        self.render_node(0, 0, names, total, &mut out);
        out
    }

    fn render_node(
        &self,
        idx: usize,
        depth: usize,
        names: &[String],
        total: f64,
        out: &mut String,
    ) {
        let pad = "  ".repeat(depth);
        let name = |j: usize| {
            names
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("x{}", j + 1))
        };
        match &self.nodes[idx] {
            Node::Leaf { value, count } => {
                out.push_str(&format!(
                    "{pad}leaf: mean = {value:.4}, n = {count} ({:.1}%)\n",
                    100.0 * *count as f64 / total
                ));
            }
            Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                out.push_str(&format!("{pad}{} <= {threshold:.4}\n", name(*feature)));
                self.render_node(*left, depth + 1, names, total, out);
                out.push_str(&format!("{pad}{} > {threshold:.4}\n", name(*feature)));
                self.render_node(*right, depth + 1, names, total, out);
            }
        }
    }
}

/// Column-major view used while growing trees.
pub(crate) struct Columns {
    pub cols: Vec<Vec<f64>>,
}

impl Columns {
    pub fn new(x: &Covariates) -> Self {
        Self {
            cols: (0..x.ncols()).map(|j| x.column(j)).collect(),
        }
    }
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
    left_count: usize,
}

pub(crate) struct Grower<'a, R: Rng> {
    pub columns: &'a Columns,
    pub targets: &'a [f64],
    pub params: TreeParams,
    pub rng: &'a mut R,
}

impl<R: Rng> Grower<'_, R> {
    /// Grow on `rows` (indices may repeat, as in a bootstrap sample).
    pub fn grow(mut self, rows: Vec<usize>) -> RegressionTree {
        let num_features = self.columns.cols.len();
        let mut nodes = Vec::new();
        self.grow_node(rows, 0, &mut nodes);
        RegressionTree {
            nodes,
            num_features,
        }
    }

    fn grow_node(&mut self, mut rows: Vec<usize>, depth: usize, nodes: &mut Vec<Node>) -> usize {
        let idx = nodes.len();
        let count = rows.len();
        let sum: f64 = rows.iter().map(|&i| self.targets[i]).sum();
        let mean = sum / count as f64;
        nodes.push(Node::Leaf { value: mean, count });

        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || count < 2 * self.params.min_leaf.max(1) {
            return idx;
        }
        let first = self.targets[rows[0]];
        if rows.iter().all(|&i| self.targets[i] == first) {
            // Pure node; store the exact value so constant targets reproduce exactly.
            nodes[idx] = Node::Leaf {
                value: first,
                count,
            };
            return idx;
        }
        let Some(best) = self.best_split(&mut rows, sum) else {
            return idx;
        };
        let col = &self.columns.cols[best.feature];
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| col[i] <= best.threshold);
        debug_assert_eq!(left_rows.len(), best.left_count);
        let left = self.grow_node(left_rows, depth + 1, nodes);
        let right = self.grow_node(right_rows, depth + 1, nodes);
        nodes[idx] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
            count,
        };
        idx
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let p = self.columns.cols.len();
        let m = self.params.mtry.unwrap_or(p).clamp(1, p);
        if m == p {
            return (0..p).collect();
        }
        let mut feats = sample(self.rng, p, m).into_vec();
        feats.sort_unstable();
        feats
    }

    /// Largest SSE reduction; ties go to the lower feature index, then the lower threshold.
    fn best_split(&mut self, rows: &mut [usize], total: f64) -> Option<BestSplit> {
        let n = rows.len();
        let min_leaf = self.params.min_leaf.max(1);
        let parent = total * total / n as f64;
        let mut best: Option<BestSplit> = None;
        for feature in self.candidate_features() {
            let col = &self.columns.cols[feature];
            rows.sort_unstable_by(|&a, &b| col[a].total_cmp(&col[b]));
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.targets[rows[k]];
                let left_n = k + 1;
                let right_n = n - left_n;
                if left_n < min_leaf {
                    continue;
                }
                if right_n < min_leaf {
                    break;
                }
                let lo = col[rows[k]];
                let hi = col[rows[k + 1]];
                if lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / left_n as f64
                    + right_sum * right_sum / right_n as f64
                    - parent;
                if gain > 1e-12 * parent.abs().max(1e-300)
                    && best.as_ref().is_none_or(|b| gain > b.gain)
                {
                    best = Some(BestSplit {
                        feature,
                        threshold: 0.5 * (lo + hi),
                        gain,
                        left_count: left_n,
                    });
                }
            }
        }
        best
    }
}

/// Single un-bagged CART tree on all rows.
pub fn fit_tree(x: &Covariates, targets: &[f64], params: &TreeParams) -> Result<RegressionTree> {
    let n = x.nrows();
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidInput(
            "cannot grow a tree on zero rows".into(),
        ));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("tree targets must be finite".into()));
    }
    let columns = Columns::new(x);
    // Only consulted when mtry < p.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    Ok(Grower {
        columns: &columns,
        targets,
        params: *params,
        rng: &mut rng,
    }
    .grow((0..n).collect()))
}
