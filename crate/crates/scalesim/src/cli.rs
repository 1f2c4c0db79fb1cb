//! Command-line front end: single runs, parameter sweeps, and report
//! rendering over previously written artifacts.
//!
//! Exit codes are part of the contract: 0 for success, 2 for anything the
//! user can fix in a config or invocation, 3 when a run ends with requests
//! still in flight (artifacts are written anyway so the partial run can be
//! inspected).

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::ScenarioConfig;
use crate::engine;
use crate::error::{Result, SimError};
use crate::metrics::RunSummary;
use crate::output::write_run_artifacts;
use crate::workload::format_seconds;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_INCOMPLETE: i32 = 3;

/// Environment variable naming the directory run outputs default into.
pub const OUTPUT_ROOT_VAR: &str = "SIM_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "sim", about = "LLM serving cluster simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its artifacts.
    Simulate(SimulateArgs),
    /// Run a scenario once per point of a parameter grid.
    Sweep(SweepArgs),
    /// Summarize a finished run directory or sweep.csv.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory (defaults to the config's, then $SIM_OUTPUT_ROOT/<name>, then ./runs/<name>).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario config (TOML) every grid point starts from.
    #[arg(short, long)]
    config: PathBuf,
    /// Grid file: a [grid] table of dotted config paths to value lists.
    #[arg(short, long)]
    grid: PathBuf,
    /// Directory for sweep.csv (same defaults as simulate).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory (containing summary.json) or a sweep.csv file.
    path: PathBuf,
}

/// Parse `args` and run the selected command, returning the process exit
/// code. Split from `main` so tests can drive the binary in-process.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version are successful exits; usage mistakes are not.
            let code = if err.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = err.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Simulate(args) => simulate(&args),
        Command::Sweep(args) => sweep(&args),
        Command::Report(args) => report(&args.path),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            EXIT_VALIDATION
        }
    }
}

/// Where a run's artifacts land, in order of preference: explicit flag, the
/// scenario's own `output` field, the output-root environment variable, a
/// `runs/` directory next to the working directory.
fn resolve_output_dir(flag: Option<&Path>, cfg: &ScenarioConfig) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Some(dir) = &cfg.output {
        return PathBuf::from(dir);
    }
    if let Ok(root) = std::env::var(OUTPUT_ROOT_VAR) {
        return Path::new(&root).join(&cfg.name);
    }
    Path::new("runs").join(&cfg.name)
}

fn simulate(args: &SimulateArgs) -> Result<i32> {
    let mut cfg = ScenarioConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let dir = resolve_output_dir(args.output.as_deref(), &cfg);
    let run = engine::run(&cfg)?;
    let summary = write_run_artifacts(&dir, &cfg, &run)?;
    println!(
        "{} seed {}: {}/{} requests, combined attainment {:.4}, {:.3} gpu-hours",
        summary.scenario,
        summary.seed,
        summary.completed,
        summary.generated,
        summary.combined_attainment,
        summary.gpu_hours,
    );
    println!("artifacts: {}", dir.display());
    if run.incomplete {
        eprintln!(
            "run incomplete: {} of {} requests unfinished at horizon {}",
            run.generated - run.records.len() as u64,
            run.generated,
            format_seconds(cfg.horizon),
        );
        return Ok(EXIT_INCOMPLETE);
    }
    Ok(EXIT_OK)
}

/// One coordinate of the sweep: a dotted config path and the value to put
/// there.
#[derive(Clone, Debug, PartialEq)]
struct GridAxis {
    path: String,
    values: Vec<toml::Value>,
}

fn load_grid(path: &Path) -> Result<Vec<GridAxis>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        SimError::validation(format!("cannot read grid {}: {e}", path.display()))
    })?;
    let doc: toml::Value = text
        .parse()
        .map_err(|e| SimError::validation(format!("{}: {e}", path.display())))?;
    let table = doc
        .as_table()
        .ok_or_else(|| SimError::validation("grid file must be a TOML table"))?;
    for key in table.keys() {
        if key != "grid" {
            return Err(SimError::validation(format!(
                "grid file has unknown table `{key}`, expected only [grid]"
            )));
        }
    }
    let grid = table
        .get("grid")
        .and_then(|v| v.as_table())
        .ok_or_else(|| SimError::validation("grid file needs a [grid] table"))?;
    let mut axes = Vec::new();
    for (path, value) in grid {
        let values = value
            .as_array()
            .ok_or_else(|| {
                SimError::validation(format!("grid key `{path}` must list its values"))
            })?
            .clone();
        if values.is_empty() {
            return Err(SimError::validation(format!(
                "grid key `{path}` has no values"
            )));
        }
        axes.push(GridAxis {
            path: path.clone(),
            values,
        });
    }
    if axes.is_empty() {
        return Err(SimError::validation("grid is empty"));
    }
    // Deterministic point order regardless of file order.
    axes.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(axes)
}

/// Overwrite the value at a dotted path inside a parsed TOML document.
/// Numeric segments index arrays; names address table keys. Writing a key
/// the schema does not declare survives here but fails the strict
/// deserialization that follows, which is the error we want (it names the
/// key).
fn set_path(root: &mut toml::Value, path: &str, val: toml::Value) -> Result<()> {
    let segments: Vec<&str> = path.split('.').collect();
    let (last, parents) = segments.split_last().expect("split produces one segment");
    let mut cur = root;
    for seg in parents {
        cur = if let Ok(idx) = seg.parse::<usize>() {
            cur.as_array_mut().and_then(|a| a.get_mut(idx)).ok_or_else(|| {
                SimError::validation(format!(
                    "grid path `{path}`: no array element at `{seg}`"
                ))
            })?
        } else {
            cur.as_table_mut()
                .ok_or_else(|| {
                    SimError::validation(format!(
                        "grid path `{path}`: `{seg}` does not address a table"
                    ))
                })?
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()))
        };
    }
    if let Ok(idx) = last.parse::<usize>() {
        let slot = cur.as_array_mut().and_then(|a| a.get_mut(idx)).ok_or_else(|| {
            SimError::validation(format!("grid path `{path}`: no array element at `{last}`"))
        })?;
        *slot = val;
    } else {
        cur.as_table_mut()
            .ok_or_else(|| {
                SimError::validation(format!(
                    "grid path `{path}`: `{last}` does not address a table"
                ))
            })?
            .insert(last.to_string(), val);
    }
    Ok(())
}

fn scalar_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn json_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// A fully resolved grid point: the axis assignment that produced it and the
/// validated config to run.
struct SweepPoint {
    index: usize,
    assignment: Vec<(String, String)>,
    cfg: ScenarioConfig,
}

fn expand_grid(
    base_doc: &toml::Value,
    base_seed: u64,
    axes: &[GridAxis],
) -> Result<Vec<SweepPoint>> {
    let grid_sets_seed = axes.iter().any(|a| a.path == "seed");
    let total: usize = axes.iter().map(|a| a.values.len()).product();
    let mut points = Vec::with_capacity(total);
    let mut seen = BTreeSet::new();
    for index in 0..total {
        // Mixed-radix decode of the point index over the sorted axes.
        let mut rem = index;
        let mut doc = base_doc.clone();
        let mut assignment = Vec::with_capacity(axes.len());
        for axis in axes {
            let pick = rem % axis.values.len();
            rem /= axis.values.len();
            set_path(&mut doc, &axis.path, axis.values[pick].clone())?;
            assignment.push((axis.path.clone(), scalar_text(&axis.values[pick])));
        }
        let key = assignment
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        if !seen.insert(key.clone()) {
            eprintln!("warning: duplicate grid point ({key}) skipped");
            continue;
        }
        let mut cfg: ScenarioConfig = doc
            .try_into()
            .map_err(|e| SimError::validation(format!("grid point ({key}): {e}")))?;
        if !grid_sets_seed {
            cfg.seed = base_seed + index as u64;
        }
        cfg.validate()
            .map_err(|e| SimError::validation(format!("grid point ({key}): {e}")))?;
        points.push(SweepPoint {
            index,
            assignment,
            cfg,
        });
    }
    Ok(points)
}

fn sweep(args: &SweepArgs) -> Result<i32> {
    // Load once through the strict path so base-config problems are reported
    // against the config file, not against every grid point.
    let base_cfg = ScenarioConfig::load(&args.config)?;
    let text = std::fs::read_to_string(&args.config)?;
    let base_doc: toml::Value = text
        .parse()
        .map_err(|e| SimError::validation(format!("{}: {e}", args.config.display())))?;
    let axes = load_grid(&args.grid)?;
    let points = expand_grid(&base_doc, base_cfg.seed, &axes)?;

    let runs: Vec<(usize, RunSummary)> = points
        .par_iter()
        .map(|point| engine::run(&point.cfg).map(|run| (point.index, crate::metrics::summarize(&point.cfg, &run))))
        .collect::<Result<_>>()?;

    let dir = resolve_output_dir(args.output.as_deref(), &base_cfg);
    fs::create_dir_all(&dir)?;
    let csv_path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_writer(File::create(&csv_path)?);

    let grid_cols: Vec<&str> = axes.iter().map(|a| a.path.as_str()).collect();
    let mut header: Vec<String> = vec!["point".into()];
    header.extend(grid_cols.iter().map(|c| c.to_string()));
    let summary_cols: Vec<String> = {
        let sample = serde_json::to_value(&runs[0].1)?;
        sample
            .as_object()
            .expect("summary serializes to an object")
            .keys()
            .cloned()
            .collect()
    };
    header.extend(summary_cols.iter().cloned());
    w.write_record(&header)?;

    let mut incomplete = false;
    for (point, (index, summary)) in points.iter().zip(&runs) {
        assert_eq!(point.index, *index);
        incomplete |= summary.incomplete;
        let mut row = vec![point.index.to_string()];
        row.extend(point.assignment.iter().map(|(_, v)| v.clone()));
        let json = serde_json::to_value(summary)?;
        let obj = json.as_object().expect("summary serializes to an object");
        row.extend(summary_cols.iter().map(|c| json_text(&obj[c])));
        w.write_record(&row)?;
    }
    w.flush()?;
    println!("{} runs -> {}", runs.len(), csv_path.display());
    Ok(if incomplete { EXIT_INCOMPLETE } else { EXIT_OK })
}

const RUN_ARTIFACTS: [&str; 5] = [
    "records.csv",
    "timeline.csv",
    "actions.csv",
    "estimates.csv",
    "summary.json",
];

/// Timeline columns worth plotting against the clock for a single run.
const RUN_PLOT_METRICS: [&str; 6] = [
    "n_interactive",
    "n_mixed",
    "n_batch",
    "queue_len_batch",
    "ibp",
    "lbp_max",
];

/// Summary columns a sweep plot cares about.
const SWEEP_PLOT_METRICS: [&str; 7] = [
    "ttft_attainment",
    "itl_attainment",
    "combined_attainment",
    "per_instance_tput",
    "gpu_hours",
    "hysteresis",
    "peak_gpus",
];

fn report(path: &Path) -> Result<i32> {
    if path.is_dir() {
        report_run_dir(path)
    } else if path.is_file() {
        report_sweep(path)
    } else {
        Err(SimError::validation(format!(
            "{} is neither a run directory nor a sweep.csv",
            path.display()
        )))
    }
}

fn report_run_dir(dir: &Path) -> Result<i32> {
    let missing: Vec<&str> = RUN_ARTIFACTS
        .iter()
        .copied()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(SimError::validation(format!(
            "{} is missing artifacts: {} (expected {})",
            dir.display(),
            missing.join(", "),
            RUN_ARTIFACTS.join(", "),
        )));
    }
    let summary_path = dir.join("summary.json");
    let text = fs::read_to_string(&summary_path)?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(|e| {
        SimError::validation(format!("cannot parse {}: {e}", summary_path.display()))
    })?;

    let json = serde_json::to_value(&summary)?;
    let obj = json.as_object().expect("summary serializes to an object");
    let width = obj.keys().map(|k| k.len()).max().unwrap_or(0);
    for (key, value) in obj {
        println!("{key:width$}  {}", json_text(value));
    }

    // Long-format extract of the timeline for plotting.
    let mut rdr = csv::Reader::from_path(dir.join("timeline.csv"))?;
    let headers = rdr.headers()?.clone();
    let clock_col = headers
        .iter()
        .position(|h| h == "clock")
        .ok_or_else(|| SimError::validation("timeline.csv has no clock column"))?;
    let metric_cols: Vec<(usize, &str)> = RUN_PLOT_METRICS
        .iter()
        .filter_map(|m| headers.iter().position(|h| h == *m).map(|i| (i, *m)))
        .collect();
    let plot_path = dir.join("plotdata.csv");
    let mut w = csv::Writer::from_writer(File::create(&plot_path)?);
    w.write_record(["metric", "x", "y", "series"])?;
    for row in rdr.records() {
        let row = row?;
        for (col, metric) in &metric_cols {
            w.write_record([*metric, &row[clock_col], &row[*col], &summary.scenario])?;
        }
    }
    w.flush()?;
    println!("plot data: {}", plot_path.display());
    Ok(EXIT_OK)
}

fn report_sweep(csv_path: &Path) -> Result<i32> {
    let mut rdr = csv::Reader::from_path(csv_path)?;
    let headers = rdr.headers()?.clone();
    let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(SimError::validation(format!(
            "{} has no data rows",
            csv_path.display()
        )));
    }
    // Layout written by `sweep`: point, grid columns, then summary columns.
    // The first summary column is recognized by name.
    let summary_start = headers
        .iter()
        .position(|h| h == "combined_attainment" || h == "config_hash")
        .ok_or_else(|| {
            SimError::validation(format!(
                "{} does not look like a sweep.csv (no summary columns)",
                csv_path.display()
            ))
        })?;
    let grid_cols: Vec<usize> = (1..summary_start).collect();

    let mut sorted: Vec<&csv::StringRecord> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        for &c in &grid_cols {
            let (x, y) = (&a[c], &b[c]);
            let ord = match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(xf), Ok(yf)) => xf.total_cmp(&yf),
                _ => x.cmp(y),
            };
            if ord != std::cmp::Ordering::Equal {
                return ord;
            }
        }
        std::cmp::Ordering::Equal
    });

    let col = |name: &str| headers.iter().position(|h| h == name);
    let shown: Vec<(usize, &str)> = grid_cols
        .iter()
        .map(|&i| (i, headers.get(i).unwrap_or("")))
        .chain(
            SWEEP_PLOT_METRICS
                .iter()
                .filter_map(|m| col(m).map(|i| (i, *m))),
        )
        .collect();
    let mut widths: Vec<usize> = shown.iter().map(|(_, name)| name.len()).collect();
    for row in &sorted {
        for (slot, (i, _)) in shown.iter().enumerate() {
            widths[slot] = widths[slot].max(row[*i].len());
        }
    }
    let header_line: Vec<String> = shown
        .iter()
        .zip(&widths)
        .map(|((_, name), w)| format!("{name:w$}"))
        .collect();
    println!("{}", header_line.join("  "));
    for row in &sorted {
        let line: Vec<String> = shown
            .iter()
            .zip(&widths)
            .map(|((i, _), w)| format!("{:w$}", &row[*i]))
            .collect();
        println!("{}", line.join("  "));
    }

    let scenario_col = col("scenario");
    let x_col = grid_cols.first().copied();
    let plot_path = csv_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("plotdata.csv");
    let mut w = csv::Writer::from_writer(File::create(&plot_path)?);
    w.write_record(["metric", "x", "y", "series"])?;
    for row in &sorted {
        let series = match (scenario_col, grid_cols.len()) {
            // With several axes the series distinguishes the non-x ones.
            (_, n) if n > 1 => grid_cols[1..]
                .iter()
                .map(|&c| format!("{}={}", headers.get(c).unwrap_or(""), &row[c]))
                .collect::<Vec<_>>()
                .join(";"),
            (Some(c), _) => row[c].to_string(),
            (None, _) => String::new(),
        };
        let x = x_col.map(|c| row[c].to_string()).unwrap_or_default();
        for metric in SWEEP_PLOT_METRICS {
            if let Some(c) = col(metric) {
                w.write_record([metric, &x, &row[c], &series])?;
            }
        }
    }
    w.flush()?;
    println!("plot data: {}", plot_path.display());
    Ok(EXIT_OK)
}
