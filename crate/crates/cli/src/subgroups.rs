//! `subgroups`: a regression tree of estimated CATE on covariates.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use ivcate::learners::{fit_tree, LeafSummary, RegressionTree, TreeParams};
use ivcate::Covariates;
use serde::Serialize;

use crate::error::{io_error, CliError, CliResult};
use crate::simulate::write;

pub const TREE_TEXT_FILE: &str = "subgroups.txt";
pub const TREE_JSON_FILE: &str = "subgroups.json";

pub struct SubgroupsArgs {
    pub cate: PathBuf,
    pub data: PathBuf,
    pub covariates: Option<Vec<String>>,
    /// Columns left out when `covariates` is not given.
    pub exclude: Vec<String>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct SubgroupReport {
    pub features: Vec<String>,
    pub rows: usize,
    pub tree: RegressionTree,
    pub leaves: Vec<LeafSummary>,
}

/// Fit the tree, write `subgroups.txt` and `subgroups.json`, return the text.
pub fn run(args: &SubgroupsArgs) -> CliResult<String> {
    if args.min_leaf == 0 {
        return Err(CliError::input("--min-leaf must be at least 1"));
    }
    let cate = read_cate(&args.cate)?;
    let (features, x, targets) = join(args, &cate)?;
    let params = TreeParams {
        min_leaf: args.min_leaf,
        max_depth: args.max_depth,
        mtry: None,
    };
    let tree = fit_tree(&x, &targets, &params)
        .map_err(|e| CliError::runtime(format!("tree fit failed: {e}")))?;
    let text = render(&tree, &features, targets.len());
    let report = SubgroupReport {
        features,
        rows: targets.len(),
        leaves: tree.leaves(),
        tree,
    };
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::runtime(e.to_string()))?;

    fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    write(&args.out.join(TREE_TEXT_FILE), text.as_bytes())?;
    write(&args.out.join(TREE_JSON_FILE), json.as_bytes())?;
    Ok(text)
}

fn render(tree: &RegressionTree, features: &[String], rows: usize) -> String {
    let mut out = format!(
        "regression tree of cate_hat on {} covariates, {rows} rows\n",
        features.len()
    );
    out.push_str(&tree.render(features));
    let _ = writeln!(out, "\nsubgroups");
    for (k, leaf) in tree.leaves().iter().enumerate() {
        let path: Vec<String> = leaf
            .conditions
            .iter()
            .map(|c| {
                format!(
                    "{} {} {:.4}",
                    features[c.feature],
                    if c.left { "<=" } else { ">" },
                    c.threshold
                )
            })
            .collect();
        let path = if path.is_empty() {
            "all rows".to_string()
        } else {
            path.join(" and ")
        };
        let _ = writeln!(
            out,
            "  {:>3}  mean {:>9.4}  {:>5.1}%  {path}",
            k + 1,
            leaf.value,
            100.0 * leaf.fraction
        );
    }
    out
}

fn schema(msg: impl Into<String>) -> CliError {
    CliError::input(msg)
}

/// `row_id -> cate_hat` from a `fit` output file.
fn read_cate(path: &PathBuf) -> CliResult<Vec<(usize, f64)>> {
    let mut r =
        csv::Reader::from_path(path).map_err(|e| schema(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| schema(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| schema(format!("{}: expected a '{name}' column", path.display())))
    };
    let (id_col, cate_col) = (col("row_id")?, col("cate_hat")?);
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| schema(format!("{}: {e}", path.display())))?;
        let id = rec.get(id_col).and_then(|v| v.trim().parse::<usize>().ok());
        let cate = rec
            .get(cate_col)
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|v| v.is_finite());
        match (id, cate) {
            (Some(id), Some(c)) => out.push((id, c)),
            _ => {
                return Err(schema(format!(
                    "{}: record {} is not (row_id, cate_hat)",
                    path.display(),
                    k + 1
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(schema(format!("{}: no rows", path.display())));
    }
    Ok(out)
}

/// Covariates of every row named in `cate`, with the matching targets.
fn join(
    args: &SubgroupsArgs,
    cate: &[(usize, f64)],
) -> CliResult<(Vec<String>, Covariates, Vec<f64>)> {
    let path = &args.data;
    let mut r =
        csv::Reader::from_path(path).map_err(|e| schema(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| schema(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let features: Vec<String> = match &args.covariates {
        Some(names) => names.clone(),
        None => header
            .iter()
            .filter(|h| !args.exclude.contains(h))
            .cloned()
            .collect(),
    };
    if features.is_empty() {
        return Err(schema("no covariate columns selected"));
    }
    let cols = features
        .iter()
        .map(|f| {
            header
                .iter()
                .position(|h| h == f)
                .ok_or_else(|| schema(format!("covariate '{f}' not in {}", path.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let wanted: HashMap<usize, usize> = cate
        .iter()
        .enumerate()
        .map(|(k, (id, _))| (*id, k))
        .collect();
    if wanted.len() != cate.len() {
        return Err(schema(format!(
            "{}: duplicate row_id values",
            args.cate.display()
        )));
    }
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; cate.len()];
    for (k, rec) in r.records().enumerate() {
        let Some(&slot) = wanted.get(&k) else {
            continue;
        };
        let rec = rec.map_err(|e| schema(format!("{}: {e}", path.display())))?;
        let values = cols
            .iter()
            .map(|&j| {
                rec.get(j)
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        schema(format!(
                            "{}: record {}, column '{}' is not a number",
                            path.display(),
                            k + 1,
                            header[j]
                        ))
                    })
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows[slot] = Some(values);
    }
    let mut flat = Vec::with_capacity(cate.len() * cols.len());
    for (k, row) in rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| {
            schema(format!(
                "row_id {} has no record in {}",
                cate[k].0,
                path.display()
            ))
        })?;
        flat.extend(row);
    }
    let x = Covariates::from_row_major(cols.len(), flat).map_err(|e| schema(e.to_string()))?;
    Ok((features, x, cate.iter().map(|(_, c)| *c).collect()))
}
