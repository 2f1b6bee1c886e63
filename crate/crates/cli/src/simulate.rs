use std::fs;
use std::path::{Path, PathBuf};

use ivcate::evaluation::run_replications;
use ivcate::Workers;

use crate::config::RunConfig;
use crate::error::{io_error, CliError, CliResult};

pub const TABLE_FILE: &str = "table.txt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const LONG_FILE: &str = "replications.csv";

pub struct SimulateArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub seed: Option<u64>,
}

/// Run the configured study and write `table.txt`, `summary.csv` and `replications.csv`.
/// Returns the rendered table.
pub fn run(args: &SimulateArgs) -> CliResult<String> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.simulation.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.output.dir.clone())
        .ok_or_else(|| CliError::input("no output directory: pass --out or set output.dir"))?;
    let sim = config.simulation_config()?;
    log::info!(
        "setting {}: {} replications, n_train {}, {} workers",
        sim.setting,
        sim.replications,
        sim.n_train,
        args.workers
    );
    let table = run_replications(&sim, Workers(args.workers))?;

    fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
    let text = table.render_text();
    write(&out.join(TABLE_FILE), text.as_bytes())?;
    let mut summary = Vec::new();
    table.write_summary_csv(&mut summary)?;
    write(&out.join(SUMMARY_FILE), &summary)?;
    let mut long = Vec::new();
    table.write_long_csv(&mut long)?;
    write(&out.join(LONG_FILE), &long)?;
    if table.total_failures() > 0 {
        log::warn!(
            "{} estimator fits failed; see {}",
            table.total_failures(),
            LONG_FILE
        );
    }
    Ok(text)
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}
