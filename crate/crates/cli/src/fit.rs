//! `fit`: nuisances and one CATE estimator on a user CSV.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ivcate::estimator::{fit_cate, predict_cate, sign, EstimatorSpec, Learner, Method};
use ivcate::learners::ForestParams;
use ivcate::nuisance::{NuisanceOptions, NuisanceSet, NUISANCE_MIN_LEAF};
use ivcate::par::with_workers;
use ivcate::{Covariates, ObservedDataset, Workers};

use crate::error::{io_error, CliError, CliResult};
use crate::simulate::write;

pub const CATE_FILE: &str = "cate.csv";
pub const MODEL_FILE: &str = "model.json";

/// Field spellings read as a missing value.
const MISSING: [&str; 6] = ["", "NA", "na", "NaN", "nan", "."];

pub struct FitArgs {
    pub data: PathBuf,
    pub outcome: String,
    pub treatment: String,
    pub instrument: String,
    pub covariates: Option<Vec<String>>,
    pub method: Method,
    pub learner: String,
    pub num_trees: usize,
    pub min_leaf: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
}

impl FitArgs {
    pub fn new(data: PathBuf, out: PathBuf) -> Self {
        Self {
            data,
            outcome: "y".into(),
            treatment: "a".into(),
            instrument: "z".into(),
            covariates: None,
            method: Method::IvRdl1,
            learner: "linear".into(),
            num_trees: ForestParams::default().num_trees,
            min_leaf: NUISANCE_MIN_LEAF,
            seed: 0,
            out,
            workers: 0,
        }
    }
}

/// A user CSV with its role columns resolved.
#[derive(Debug, Clone)]
pub struct UserDataset {
    pub data: ObservedDataset,
    pub covariate_names: Vec<String>,
    /// 0-based record index in the file of every kept row.
    pub row_ids: Vec<usize>,
    pub dropped: usize,
}

pub struct FitSummary {
    pub rows: usize,
    pub dropped: usize,
    pub covariates: Vec<String>,
}

pub fn run(args: &FitArgs) -> CliResult<FitSummary> {
    let learner = match args.learner.as_str() {
        "linear" => Learner::linear(),
        "lasso" => Learner::lasso_cv(),
        "krr" => Learner::krr(),
        other => {
            return Err(CliError::input(format!(
                "unknown learner '{other}' (expected linear, lasso or krr)"
            )))
        }
    };
    let user = read_user_dataset(args)?;
    if user.dropped > 0 {
        log::warn!(
            "dropped {} rows with missing values in role columns",
            user.dropped
        );
    }
    let opts = NuisanceOptions {
        forest: ForestParams {
            num_trees: args.num_trees,
            min_leaf: args.min_leaf,
            ..ForestParams::default()
        },
        seed: args.seed,
        ..NuisanceOptions::default()
    };
    let spec = EstimatorSpec::new(args.method, with_seed(learner, args.seed));
    let (model, cate) = with_workers(Workers(args.workers), || -> CliResult<_> {
        let set = NuisanceSet::fit(&user.data, &opts)?;
        let model = fit_cate(&user.data, &set, &spec)?;
        let cate = user
            .data
            .x()
            .rows()
            .map(|x| predict_cate(&model, x))
            .collect::<ivcate::Result<Vec<f64>>>()?;
        Ok((model, cate))
    })
    .map_err(|e| CliError::runtime(format!("estimation failed: {e}")))?;

    fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let failed = |e: csv::Error| CliError::runtime(e.to_string());
    w.write_record(["row_id", "cate_hat", "regime"])
        .map_err(failed)?;
    for (id, c) in user.row_ids.iter().zip(&cate) {
        w.write_record([id.to_string(), c.to_string(), sign(*c).to_string()])
            .map_err(failed)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    write(&args.out.join(CATE_FILE), &bytes)?;
    write(&args.out.join(MODEL_FILE), model.to_json()?.as_bytes())?;
    Ok(FitSummary {
        rows: user.data.len(),
        dropped: user.dropped,
        covariates: user.covariate_names,
    })
}

fn with_seed(learner: Learner, seed: u64) -> Learner {
    match learner {
        Learner::Krr(o) => Learner::Krr(ivcate::estimator::KrrOptions { seed, ..o }),
        other => other,
    }
}

fn is_missing(field: &str) -> bool {
    MISSING.contains(&field.trim())
}

fn parse_number(field: &str, record: usize, column: &str) -> CliResult<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            CliError::input(format!(
                "record {}: column '{column}' holds '{field}', not a number",
                record + 1
            ))
        })
}

/// Map a 0/1 or -1/+1 column onto -1/+1 (0 becomes -1).
pub fn normalize_binary(values: &[f64], column: &str) -> CliResult<Vec<i8>> {
    let seen: BTreeSet<i64> = values
        .iter()
        .map(|v| {
            if v.fract() == 0.0 {
                *v as i64
            } else {
                i64::MAX
            }
        })
        .collect();
    if seen.iter().any(|v| ![-1, 0, 1].contains(v)) {
        return Err(CliError::input(format!(
            "column '{column}' must be coded 0/1 or -1/1"
        )));
    }
    if seen.contains(&0) && seen.contains(&-1) {
        return Err(CliError::input(format!(
            "column '{column}' mixes the 0/1 and -1/1 codings"
        )));
    }
    Ok(values
        .iter()
        .map(|v| if *v > 0.0 { 1 } else { -1 })
        .collect())
}

pub fn read_user_dataset(args: &FitArgs) -> CliResult<UserDataset> {
    let file = fs::File::open(&args.data)
        .map_err(|e| CliError::input(format!("{}: {e}", args.data.display())))?;
    read_user_csv(file, &args.data, args)
}

fn read_user_csv<R: std::io::Read>(
    reader: R,
    path: &Path,
    args: &FitArgs,
) -> CliResult<UserDataset> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str, role: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| {
            CliError::input(format!(
                "{role} column '{name}' not found in {}",
                path.display()
            ))
        })
    };
    let (yi, ai, zi) = (
        find(&args.outcome, "outcome")?,
        find(&args.treatment, "treatment")?,
        find(&args.instrument, "instrument")?,
    );
    if yi == ai || yi == zi || ai == zi {
        return Err(CliError::input(
            "outcome, treatment and instrument must be distinct columns",
        ));
    }
    let covariate_names: Vec<String> = match &args.covariates {
        Some(names) => names.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(j, _)| ![yi, ai, zi].contains(j))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let xi = covariate_names
        .iter()
        .map(|c| find(c, "covariate"))
        .collect::<CliResult<Vec<_>>>()?;
    if xi.is_empty() {
        return Err(CliError::input("no covariate columns"));
    }
    if xi.iter().any(|j| [yi, ai, zi].contains(j)) {
        return Err(CliError::input(
            "a covariate column is also used as outcome, treatment or instrument",
        ));
    }

    let (mut y, mut a, mut z, mut x, mut row_ids) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut dropped = 0;
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let roles = std::iter::once(yi)
            .chain([ai, zi])
            .chain(xi.iter().copied());
        if roles.clone().any(|j| rec.get(j).is_none_or(is_missing)) {
            dropped += 1;
            continue;
        }
        y.push(parse_number(&rec[yi], k, &header[yi])?);
        a.push(parse_number(&rec[ai], k, &header[ai])?);
        z.push(parse_number(&rec[zi], k, &header[zi])?);
        for &j in &xi {
            x.push(parse_number(&rec[j], k, &header[j])?);
        }
        row_ids.push(k);
    }
    if y.is_empty() {
        return Err(CliError::input(format!(
            "{}: no complete rows ({dropped} dropped)",
            path.display()
        )));
    }
    let a = normalize_binary(&a, &args.treatment)?;
    let z = normalize_binary(&z, &args.instrument)?;
    let x = Covariates::from_row_major(xi.len(), x).map_err(|e| CliError::input(e.to_string()))?;
    let data = ObservedDataset::new(y, x, a, z).map_err(|e| CliError::input(e.to_string()))?;
    Ok(UserDataset {
        data,
        covariate_names,
        row_ids,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> CliResult<UserDataset> {
        let args = FitArgs::new(PathBuf::from("mem.csv"), PathBuf::from("out"));
        read_user_csv(text.as_bytes(), Path::new("mem.csv"), &args)
    }

    #[test]
    fn codings_normalize_to_signs() {
        assert_eq!(
            normalize_binary(&[0.0, 1.0, 1.0], "a").unwrap(),
            vec![-1, 1, 1]
        );
        assert_eq!(normalize_binary(&[-1.0, 1.0], "a").unwrap(), vec![-1, 1]);
        assert!(normalize_binary(&[-1.0, 0.0], "a").is_err());
        assert!(normalize_binary(&[2.0, 1.0], "a").is_err());
        assert!(normalize_binary(&[0.5], "a").is_err());
    }

    #[test]
    fn missing_rows_are_dropped_and_counted() {
        let d = parse("y,x1,a,z\n1.0,0.5,1,0\n2.0,,0,1\nNA,0.1,1,1\n3.0,0.2,0,0\n").unwrap();
        assert_eq!(d.data.len(), 2);
        assert_eq!(d.dropped, 2);
        assert_eq!(d.row_ids, vec![0, 3]);
        assert_eq!(d.data.a(), &[1, -1]);
        assert_eq!(d.covariate_names, vec!["x1"]);
    }

    #[test]
    fn malformed_input_is_an_input_error() {
        assert_eq!(parse("y,x1,a\n1,2,1\n").unwrap_err().code(), 2);
        assert_eq!(parse("y,x1,a,z\n1,abc,1,1\n").unwrap_err().code(), 2);
        assert_eq!(parse("y,x1,a,z\n,1,1,1\n").unwrap_err().code(), 2);
    }
}
