use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sci_core::simulation::{SimGrid, SimReport};
use sci_core::simulation::budget_error;
use sci_core::{run_cell, Error, Result, SimConfig, Step};

use crate::args::SimulateArgs;
use crate::report::SCHEMA_VERSION;
use crate::{ensure_parent, write_json};

#[derive(Debug, Serialize)]
struct SimulationFile {
    schema_version: u32,
    version: &'static str,
    /// The configuration as read, with defaults filled in.
    config: serde_json::Value,
    cells: Vec<SimReport>,
}

#[derive(Debug, Serialize)]
struct Runtime {
    threads: usize,
    total_seconds: f64,
    cells: Vec<CellRuntime>,
}

#[derive(Debug, Serialize)]
struct CellRuntime {
    t0: usize,
    n_interfered: usize,
    r_fit: usize,
    seconds: f64,
}

fn schema_error(msg: impl std::fmt::Display) -> Error {
    Error::Validation { step: Step::Simulation, msg: format!("config: {msg}") }
}

/// Reads either a single cell or a grid whose `t0`, `n_interfered` and
/// `r_fit` are lists.
pub fn read_config(path: &Path) -> Result<(serde_json::Value, Vec<SimConfig>)> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(schema_error)?;
    let is_grid = ["t0", "n_interfered", "r_fit"].iter().any(|k| value.get(k).is_some_and(|v| v.is_array()));
    let (echo, cells) = if is_grid {
        let grid: SimGrid = serde_json::from_value(value).map_err(schema_error)?;
        (serde_json::to_value(&grid).map_err(schema_error)?, grid.cells())
    } else {
        let cell: SimConfig = serde_json::from_value(value).map_err(schema_error)?;
        (serde_json::to_value(&cell).map_err(schema_error)?, vec![cell])
    };
    if cells.is_empty() {
        return Err(schema_error("the grid has no cells"));
    }
    for c in &cells {
        c.validate()?;
    }
    Ok((echo, cells))
}

pub fn run(args: &SimulateArgs, threads: Option<usize>) -> Result<()> {
    let (config, cells) = read_config(&args.config)?;
    fs::create_dir_all(&args.out)?;
    let start = Instant::now();
    let mut reports = Vec::with_capacity(cells.len());
    let mut timings = Vec::with_capacity(cells.len());
    for cell in &cells {
        let t = Instant::now();
        let report = run_cell(cell).map_err(|e| annotate(cell, e))?;
        timings.push(CellRuntime {
            t0: cell.t0,
            n_interfered: cell.n_interfered,
            r_fit: cell.r_fit,
            seconds: t.elapsed().as_secs_f64(),
        });
        reports.push(report);
    }
    let runtime = Runtime {
        threads: threads.unwrap_or_else(rayon::current_num_threads),
        total_seconds: start.elapsed().as_secs_f64(),
        cells: timings,
    };

    write_bias(&args.out.join("bias.csv"), &reports)?;
    write_coverage(&args.out.join("coverage.csv"), &reports)?;
    write_selection(&args.out.join("selection.csv"), &reports)?;
    let file = SimulationFile { schema_version: SCHEMA_VERSION, version: env!("CARGO_PKG_VERSION"), config, cells: reports };
    write_json(Some(&args.out.join("report.json")), &file)?;
    write_json(Some(&args.out.join("runtime.json")), &runtime)?;
    match file.cells.iter().find(|c| !c.within_budget) {
        Some(cell) => {
            let over = file.cells.iter().filter(|c| !c.within_budget).count();
            let c = &cell.config;
            let msg = match budget_error(cell) {
                Error::Numerical { msg, .. } => msg,
                other => other.to_string(),
            };
            Err(Error::Numerical {
                step: Step::Simulation,
                msg: format!(
                    "{over} cell(s) over the failure budget, first (n_interfered={}, t0={}, r_fit={}): {msg}",
                    c.n_interfered, c.t0, c.r_fit
                ),
            })
        }
        None => Ok(()),
    }
}

fn annotate(cell: &SimConfig, e: Error) -> Error {
    let msg = format!("cell (n_interfered={}, t0={}, r_fit={}): {e}", cell.n_interfered, cell.t0, cell.r_fit);
    if e.is_validation() {
        Error::Validation { step: Step::Simulation, msg }
    } else {
        Error::Numerical { step: Step::Simulation, msg }
    }
}

fn cell_key(c: &SimConfig) -> [String; 4] {
    [c.n_units.to_string(), c.t0.to_string(), c.n_interfered.to_string(), c.r_fit.to_string()]
}

const CELL_HEADER: [&str; 4] = ["n_units", "t0", "n_interfered", "r_fit"];

fn writer(path: &Path, extra: &[&str]) -> Result<csv::Writer<fs::File>> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CELL_HEADER.iter().chain(extra))?;
    Ok(w)
}

fn write_bias(path: &Path, reports: &[SimReport]) -> Result<()> {
    let mut w = writer(path, &["estimator", "unit", "n", "mean", "median", "q25", "q75", "median_abs", "rmse"])?;
    for rep in reports {
        for b in &rep.bias {
            let mut row = cell_key(&rep.config).to_vec();
            row.extend([
                b.estimator.clone(),
                b.unit.to_string(),
                b.n.to_string(),
                b.mean.to_string(),
                b.median.to_string(),
                b.q25.to_string(),
                b.q75.to_string(),
                b.median_abs.to_string(),
                b.rmse.to_string(),
            ]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_coverage(path: &Path, reports: &[SimReport]) -> Result<()> {
    let mut w = writer(path, &["estimator", "unit", "level", "n", "coverage", "mc_se"])?;
    for rep in reports {
        for c in &rep.coverage {
            let mut row = cell_key(&rep.config).to_vec();
            row.extend([
                c.estimator.clone(),
                c.unit.to_string(),
                c.level.to_string(),
                c.n.to_string(),
                c.coverage.to_string(),
                c.mc_se.to_string(),
            ]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_selection(path: &Path, reports: &[SimReport]) -> Result<()> {
    let mut w = writer(path, &["n_ok", "n_failed", "within_budget", "selection_accuracy", "mc_se", "mean_retries", "block_len"])?;
    for rep in reports {
        let mut row = cell_key(&rep.config).to_vec();
        row.extend([
            rep.n_ok.to_string(),
            rep.n_failed.to_string(),
            rep.within_budget.to_string(),
            rep.selection_accuracy.p.to_string(),
            rep.selection_accuracy.mc_se.to_string(),
            rep.mean_retries.to_string(),
            rep.block_len.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
