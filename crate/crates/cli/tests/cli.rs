use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ivcate::dgp::{generate_dataset, sample_covariates, SettingId};
use ivcate_cli::config::RunConfig;
use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_ivcate");

fn ivcate(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("IVCATE_WORKERS")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

/// A bundled config cut down to test size.
fn shrunk_config(dir: &Path, name: &str) -> PathBuf {
    let text = fs::read_to_string(bundled(name)).unwrap();
    let mut out = String::new();
    for line in text.lines() {
        let line = match line.split_once('=').map(|(k, _)| k.trim()) {
            Some("replications") => "replications = 3",
            Some("n_test") => "n_test = 400",
            Some("n_train") => "n_train = 300",
            Some("num_trees") => "num_trees = 25",
            _ => line,
        };
        out.push_str(line);
        out.push('\n');
    }
    if !out.contains("num_trees") {
        out.push_str("\n[nuisance]\nnum_trees = 25\n");
    }
    let path = dir.join(name);
    fs::write(&path, out).unwrap();
    path
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bundled_configs_parse() {
    for k in 1..=4 {
        let config = RunConfig::load(&bundled(&format!("setting{k}.toml"))).unwrap();
        let sim = config.simulation_config().unwrap();
        assert_eq!(sim.setting.number(), k);
        assert_eq!((sim.n_train, sim.replications), (500, 100));
    }
}

#[test]
fn simulate_writes_the_table() {
    let tmp = TempDir::new().unwrap();
    let config = shrunk_config(tmp.path(), "setting1.toml");
    let out = tmp.path().join("run");
    let res = ivcate(&["simulate", "--config", path(&config), "--out", path(&out)]);
    assert!(res.status.success(), "{}", stderr(&res));
    let printed = String::from_utf8(res.stdout).unwrap();
    for label in ["IV-DL", "IV-RDL1", "IV-RDL2", "Wald", "optimal"] {
        assert!(printed.contains(label), "{label} missing:\n{printed}");
    }
    assert_eq!(fs::read_to_string(out.join("table.txt")).unwrap(), printed);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(
        summary.lines().next().unwrap(),
        "setting,estimator,metric,mean,se,failures"
    );
    assert_eq!(summary.lines().count(), 1 + 4 * 3 + 1);
    let long = fs::read_to_string(out.join("replications.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 3 * 4 * 4);
}

#[test]
fn every_bundled_setting_runs() {
    let tmp = TempDir::new().unwrap();
    for k in 2..=4 {
        let config = shrunk_config(tmp.path(), &format!("setting{k}.toml"));
        let out = tmp.path().join(format!("s{k}"));
        let res = ivcate(&["simulate", "--config", path(&config), "--out", path(&out)]);
        assert!(res.status.success(), "setting {k}: {}", stderr(&res));
        assert!(String::from_utf8(res.stdout)
            .unwrap()
            .starts_with(&format!("Setting {k} |")));
    }
}

#[test]
fn zero_replications_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "[simulation]\nsetting = 2\nreplications = 0\n").unwrap();
    let res = ivcate(&[
        "simulate",
        "--config",
        path(&config),
        "--out",
        path(&tmp.path().join("o")),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let msg = stderr(&res);
    assert!(
        msg.contains("bad.toml:3:") && msg.contains("replications"),
        "{msg}"
    );
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("typo.toml");
    fs::write(&config, "[simulation]\nreplication = 3\n").unwrap();
    let res = ivcate(&[
        "simulate",
        "--config",
        path(&config),
        "--out",
        path(tmp.path()),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("typo.toml:2:"), "{}", stderr(&res));
}

#[test]
fn reruns_and_worker_counts_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let config = shrunk_config(tmp.path(), "setting3.toml");
    let mut outputs = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "1"), ("c", "4"), ("d", "0")] {
        let out = tmp.path().join(name);
        let res = ivcate(&[
            "simulate",
            "--config",
            path(&config),
            "--out",
            path(&out),
            "--workers",
            workers,
        ]);
        assert!(res.status.success(), "{}", stderr(&res));
        outputs.push(
            ["summary.csv", "replications.csv", "table.txt"]
                .map(|f| fs::read(out.join(f)).unwrap()),
        );
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));

    let env_out = tmp.path().join("env");
    let res = Command::new(BIN)
        .args([
            "simulate",
            "--config",
            path(&config),
            "--out",
            path(&env_out),
        ])
        .env("IVCATE_WORKERS", "3")
        .output()
        .unwrap();
    assert!(res.status.success());
    assert_eq!(
        fs::read(env_out.join("summary.csv")).unwrap(),
        outputs[0][0]
    );

    let seeded = tmp.path().join("seeded");
    let res = ivcate(&[
        "simulate",
        "--config",
        path(&config),
        "--out",
        path(&seeded),
        "--seed",
        "99",
    ]);
    assert!(res.status.success());
    assert_ne!(fs::read(seeded.join("summary.csv")).unwrap(), outputs[0][0]);
}

#[test]
fn help_documents_config_keys() {
    let res = ivcate(&["simulate", "--help"]);
    let text = String::from_utf8(res.stdout).unwrap();
    for key in [
        "replications = 100",
        "n_train = 500",
        "pi_clip = 0.01",
        "delta_floor = 0.05",
        "min_leaf = 20",
        "learner",
    ] {
        assert!(text.contains(key), "{key}");
    }
    assert!(text.contains("IVCATE_WORKERS"));
}

/// Write `data` with treatment and instrument as 0/1 or -1/1.
fn write_data(path: &Path, data: &ivcate::ObservedDataset, zero_one: bool) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["y", "x1", "x2", "x3", "x4", "x5", "a", "z"])
        .unwrap();
    let code = |v: i8| {
        if zero_one {
            ((v + 1) / 2).to_string()
        } else {
            v.to_string()
        }
    };
    for i in 0..data.len() {
        let mut rec = vec![data.y()[i].to_string()];
        rec.extend(data.x().row(i).iter().map(f64::to_string));
        rec.push(code(data.a()[i]));
        rec.push(code(data.z()[i]));
        w.write_record(&rec).unwrap();
    }
    w.flush().unwrap();
}

fn fit_args<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "fit",
        "--data",
        data,
        "--outcome",
        "y",
        "--treatment",
        "a",
        "--instrument",
        "z",
    ];
    args.extend([
        "--method",
        "ivrdl1",
        "--learner",
        "linear",
        "--trees",
        "40",
        "--out",
        out,
    ]);
    args.extend(extra);
    args
}

#[test]
fn fit_covers_every_row_and_ignores_coding() {
    let tmp = TempDir::new().unwrap();
    let (data, _) = generate_dataset(SettingId::Setting1, 600, 11).unwrap();
    let (d01, dpm) = (tmp.path().join("d01.csv"), tmp.path().join("dpm.csv"));
    write_data(&d01, &data, true);
    write_data(&dpm, &data, false);
    let (o01, opm) = (tmp.path().join("o01"), tmp.path().join("opm"));
    let res = ivcate(&fit_args(path(&d01), path(&o01), &["--workers", "1"]));
    assert!(res.status.success(), "{}", stderr(&res));
    let res = ivcate(&fit_args(path(&dpm), path(&opm), &["--workers", "4"]));
    assert!(res.status.success(), "{}", stderr(&res));

    let cate = fs::read_to_string(o01.join("cate.csv")).unwrap();
    let mut lines = cate.lines();
    assert_eq!(lines.next(), Some("row_id,cate_hat,regime"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 600);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r[0], k.to_string());
        let c: f64 = r[1].parse().unwrap();
        assert_eq!(r[2], if c >= 0.0 { "1" } else { "-1" });
    }
    assert_eq!(
        fs::read(o01.join("cate.csv")).unwrap(),
        fs::read(opm.join("cate.csv")).unwrap()
    );
    assert_eq!(
        fs::read(o01.join("model.json")).unwrap(),
        fs::read(opm.join("model.json")).unwrap()
    );
    let model = ivcate::estimator::CateModel::from_json(
        &fs::read_to_string(o01.join("model.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(model.dim, 5);
}

#[test]
fn fit_drops_incomplete_rows() {
    let tmp = TempDir::new().unwrap();
    let (data, _) = generate_dataset(SettingId::Setting1, 400, 12).unwrap();
    let full = tmp.path().join("full.csv");
    write_data(&full, &data, true);
    let text = fs::read_to_string(&full).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let fields: Vec<&str> = lines[3].split(',').collect();
    lines[3] = format!("{},NA,{}", fields[0], fields[2..].join(","));
    lines[10] = format!("{},", lines[10].rsplit_once(',').unwrap().0);
    let holed = tmp.path().join("holed.csv");
    fs::write(&holed, lines.join("\n") + "\n").unwrap();
    let out = tmp.path().join("o");
    let res = ivcate(&fit_args(path(&holed), path(&out), &[]));
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(String::from_utf8(res.stdout)
        .unwrap()
        .contains("on 398 rows (2 dropped"));
    let ids: Vec<String> = fs::read_to_string(out.join("cate.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(ids.len(), 398);
    assert!(!ids.contains(&"2".to_string()) && !ids.contains(&"9".to_string()));
}

#[test]
fn constant_instrument_fails_at_runtime() {
    let tmp = TempDir::new().unwrap();
    let (data, _) = generate_dataset(SettingId::Setting1, 300, 13).unwrap();
    let z = vec![1i8; data.len()];
    let flat =
        ivcate::ObservedDataset::new(data.y().to_vec(), data.x().clone(), data.a().to_vec(), z)
            .unwrap();
    let csv = tmp.path().join("flat.csv");
    write_data(&csv, &flat, true);
    let res = ivcate(&fit_args(path(&csv), path(&tmp.path().join("o")), &[]));
    assert_eq!(res.status.code(), Some(1));
    assert!(
        stderr(&res).contains("degenerate instrument"),
        "{}",
        stderr(&res)
    );
}

#[test]
fn fit_input_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("d.csv");
    fs::write(&csv, "y,x1,a,z\n1,0.5,1,0\n2,0.1,0,1\n").unwrap();
    let out = tmp.path().join("o");
    let mut args = fit_args(path(&csv), path(&out), &[]);
    args[6] = "treat";
    assert_eq!(ivcate(&args).status.code(), Some(2));
    fs::write(&csv, "y,x1,a,z\n1,0.5,2,0\n2,0.1,0,1\n").unwrap();
    assert_eq!(
        ivcate(&fit_args(path(&csv), path(&out), &[])).status.code(),
        Some(2)
    );
    assert_eq!(
        ivcate(&fit_args(
            path(&tmp.path().join("missing.csv")),
            path(&out),
            &[]
        ))
        .status
        .code(),
        Some(2)
    );
}

/// Write `data.csv` (x1..x5) and `cate.csv` with `cate(x)` for `n` covariate rows.
fn subgroup_inputs(
    dir: &Path,
    n: usize,
    cate: impl Fn(&[f64]) -> f64,
) -> (PathBuf, PathBuf, ivcate::Covariates) {
    let x = sample_covariates(n, 21);
    let (data, cates) = (dir.join("data.csv"), dir.join("cate.csv"));
    let mut w = csv::Writer::from_path(&data).unwrap();
    w.write_record(["x1", "x2", "x3", "x4", "x5"]).unwrap();
    for r in x.rows() {
        w.write_record(r.iter().map(f64::to_string)).unwrap();
    }
    w.flush().unwrap();
    let mut w = csv::Writer::from_path(&cates).unwrap();
    w.write_record(["row_id", "cate_hat", "regime"]).unwrap();
    for (i, r) in x.rows().enumerate() {
        let c = cate(r);
        w.write_record([
            i.to_string(),
            c.to_string(),
            if c >= 0.0 { "1" } else { "-1" }.to_string(),
        ])
        .unwrap();
    }
    w.flush().unwrap();
    (data, cates, x)
}

fn subgroups(dir: &Path, data: &Path, cate: &Path, min_leaf: &str) -> (Output, PathBuf) {
    let out = dir.join("tree");
    let res = ivcate(&[
        "subgroups",
        "--cate",
        path(cate),
        "--data",
        path(data),
        "--min-leaf",
        min_leaf,
        "--out",
        path(&out),
    ]);
    (res, out)
}

#[test]
fn constant_cate_gives_one_leaf() {
    let tmp = TempDir::new().unwrap();
    let (data, cate, _) = subgroup_inputs(tmp.path(), 300, |_| 0.7);
    let (res, out) = subgroups(tmp.path(), &data, &cate, "10");
    assert!(res.status.success(), "{}", stderr(&res));
    let json: Value =
        serde_json::from_str(&fs::read_to_string(out.join("subgroups.json")).unwrap()).unwrap();
    assert_eq!(json["leaves"].as_array().unwrap().len(), 1);
    assert_eq!(json["leaves"][0]["value"].as_f64(), Some(0.7));
    assert!(String::from_utf8(res.stdout).unwrap().contains("100.0%"));
}

/// Brute-force scan over every feature and midpoint threshold; returns the
/// best feature and the interval of thresholds that realize its partition.
fn best_split(x: &ivcate::Covariates, t: &[f64]) -> (usize, f64, f64) {
    let mut best = (f64::INFINITY, 0, 0.0, 0.0);
    for j in 0..x.ncols() {
        let mut order: Vec<usize> = (0..t.len()).collect();
        order.sort_by(|&a, &b| x.row(a)[j].total_cmp(&x.row(b)[j]));
        for cut in 1..order.len() {
            let (l, r) = order.split_at(cut);
            let sse = |idx: &[usize]| {
                let m = idx.iter().map(|&i| t[i]).sum::<f64>() / idx.len() as f64;
                idx.iter().map(|&i| (t[i] - m).powi(2)).sum::<f64>()
            };
            let s = sse(l) + sse(r);
            if s < best.0 - 1e-12 {
                best = (s, j, x.row(l[l.len() - 1])[j], x.row(r[0])[j]);
            }
        }
    }
    (best.1, best.2, best.3)
}

#[test]
fn step_cate_splits_on_x1_at_zero() {
    let tmp = TempDir::new().unwrap();
    let step = |x: &[f64]| if x[0] > 0.0 { 1.0 } else { 0.0 };
    let (data, cate, x) = subgroup_inputs(tmp.path(), 1000, step);
    let (res, out) = subgroups(tmp.path(), &data, &cate, "20");
    assert!(res.status.success(), "{}", stderr(&res));
    let json: Value =
        serde_json::from_str(&fs::read_to_string(out.join("subgroups.json")).unwrap()).unwrap();
    let root = &json["tree"]["nodes"][0];
    let targets: Vec<f64> = x.rows().map(step).collect();
    let (feature, lo, hi) = best_split(&x, &targets);
    assert_eq!(feature, 0);
    assert_eq!(root["feature"].as_u64(), Some(0));
    let threshold = root["threshold"].as_f64().unwrap();
    assert!(
        lo <= threshold && threshold < hi,
        "{threshold} outside [{lo}, {hi})"
    );
    assert!(threshold.abs() < 0.01);
    let leaves = json["leaves"].as_array().unwrap();
    assert_eq!(leaves.len(), 2);
    assert_eq!(leaves[0]["value"].as_f64(), Some(0.0));
    assert_eq!(leaves[1]["value"].as_f64(), Some(1.0));
}

#[test]
fn printed_leaf_shares_add_to_100() {
    let tmp = TempDir::new().unwrap();
    let (data, cate, _) = subgroup_inputs(tmp.path(), 800, |x| {
        x[0] - 2.0 * x[1] * x[2] + (3.0 * x[3]).sin()
    });
    let (res, _) = subgroups(tmp.path(), &data, &cate, "30");
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    let shares: Vec<f64> = text
        .lines()
        .skip_while(|l| *l != "subgroups")
        .skip(1)
        .map(|l| {
            l.split_whitespace()
                .nth(3)
                .unwrap()
                .trim_end_matches('%')
                .parse::<f64>()
                .unwrap()
        })
        .collect();
    assert!(shares.len() > 2);
    let total: f64 = shares.iter().sum();
    assert!(
        (total - 100.0).abs() <= 0.05 * shares.len() as f64,
        "{total}"
    );
}

#[test]
fn subgroup_schema_mismatch_exits_2() {
    let tmp = TempDir::new().unwrap();
    let (data, cate, _) = subgroup_inputs(tmp.path(), 100, |x| x[0]);
    let (res, _) = subgroups(tmp.path(), &data, &data, "10");
    assert_eq!(res.status.code(), Some(2));
    let bad = tmp.path().join("far.csv");
    fs::write(&bad, "row_id,cate_hat,regime\n5000,1.0,1\n").unwrap();
    assert_eq!(
        subgroups(tmp.path(), &data, &bad, "10").0.status.code(),
        Some(2)
    );
    let res = ivcate(&[
        "subgroups",
        "--cate",
        path(&cate),
        "--data",
        path(&data),
        "--covariates",
        "x9",
        "--out",
        path(tmp.path()),
    ]);
    assert_eq!(res.status.code(), Some(2));
}
