mod args;
mod report;
mod simulate;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;
use sci_core::dynamic::{estimate_dynamic_effects_with, DynamicOptions};
use sci_core::estimator::estimate_average_effects_with;
use sci_core::{
    block_bootstrap, default_block_len, load_covariates, load_panel, placebo_split,
    residualize_covariates, BootstrapOptions, CovariatePanel, Error, EstimatorOptions, Panel64, Result,
};

use args::{BootArgs, Cli, Command, DataArgs};
use report::{
    BootstrapReport, CovariateReport, DynamicReport, EstimateReport, Falsification, Inputs, PanelInfo, RunReport,
    SCHEMA_VERSION,
};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::from(EXIT_NUMERICAL)
            }
        }
    }
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads must be positive"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    pool.install(|| match cli.command {
        Command::Estimate(a) => estimate(&a.data, &a.boot, None, argv),
        Command::Placebo(a) => estimate(&a.data, &a.boot, Some(a.placebo_t0), argv),
        Command::Dynamic(a) => dynamic(&a, argv),
        Command::Simulate(a) => simulate::run(&a, cli.threads),
    })
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation { step: sci_core::Step::Input, msg: msg.into() }
}

fn inputs(data: &DataArgs, boot: &BootArgs, argv: Vec<String>) -> Inputs {
    Inputs {
        argv,
        input: data.input.display().to_string(),
        t0: data.t0,
        treated: data.treated.clone(),
        r: data.r,
        h: data.h,
        covariates: data.covariates.as_ref().map(|p| p.display().to_string()),
        bootstrap: boot.bootstrap,
        block_len: boot.block_len,
        levels: boot.levels.clone(),
        seed: boot.seed,
        fix_selection: boot.fix_selection,
        placebo_t0: None,
        trend: None,
    }
}

struct Prepared {
    panel: Panel64,
    covariates: Option<CovariateReport>,
    falsification: Option<Falsification>,
}

/// Loads the panel, applies a placebo split and removes covariates.
fn prepare(data: &DataArgs, placebo_t0: Option<usize>) -> Result<Prepared> {
    let mut panel: Panel64 = load_panel(&data.input, data.t0, &data.treated)?;
    let mut falsification = None;
    if let Some(pt0) = placebo_t0 {
        panel = placebo_split(&panel, pt0)?;
        falsification =
            Some(Falsification { original_t0: data.t0, placebo_t0: pt0, n_post_placebo: panel.n_post() });
    }
    let mut covariates = None;
    if let Some(path) = &data.covariates {
        let cov: CovariatePanel<f64> = load_covariates(path)?;
        let cov = if placebo_t0.is_some() {
            let cols = cov.covariates().columns(0, panel.n_periods().min(cov.n_periods())).into_owned();
            CovariatePanel::new(cols, cov.names().to_vec())?
        } else {
            cov
        };
        let adj = residualize_covariates(&panel, &cov)?;
        covariates = Some(CovariateReport::new(cov.names(), &adj));
        panel = adj.residual_panel;
    }
    Ok(Prepared { panel, covariates, falsification })
}

fn bootstrap_report(
    panel: &Panel64,
    r: usize,
    opts: &EstimatorOptions,
    boot: &BootArgs,
    warnings: &mut Vec<String>,
) -> Result<Option<BootstrapReport>> {
    let Some(n_boot) = boot.bootstrap else { return Ok(None) };
    let block_len = boot.block_len.unwrap_or_else(|| default_block_len(panel.n_periods()));
    let bopts = BootstrapOptions {
        n_boot,
        block_len,
        levels: boot.levels.clone(),
        seed: boot.seed,
        fix_selection: boot.fix_selection,
        estimator: *opts,
    };
    let result = block_bootstrap(panel, r, &bopts)?;
    if result.retries > 0 {
        warnings.push(format!("{} bootstrap replicates were redrawn after a failed fit", result.retries));
    }
    Ok(Some(BootstrapReport::new(panel, &result, boot.fix_selection)))
}

fn estimate(data: &DataArgs, boot: &BootArgs, placebo_t0: Option<usize>, argv: Vec<String>) -> Result<()> {
    let mut inputs = inputs(data, boot, argv);
    inputs.placebo_t0 = placebo_t0;
    let Prepared { panel, covariates, falsification } = prepare(data, placebo_t0)?;
    let opts = EstimatorOptions { h: data.h, ..Default::default() };
    let est = estimate_average_effects_with(&panel, data.r, &opts)?;
    let mut warnings = est.diagnostics.warnings.clone();
    let bootstrap = bootstrap_report(&panel, data.r, &opts, boot, &mut warnings)?;
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        command: if placebo_t0.is_some() { "placebo" } else { "estimate" },
        version: env!("CARGO_PKG_VERSION"),
        inputs,
        panel: PanelInfo::new(&panel),
        falsification,
        covariates,
        estimate: EstimateReport::new(&panel, &est),
        bootstrap,
        dynamic: None,
        warnings,
    };
    write_json(data.output.as_deref(), &report)
}

fn dynamic(a: &args::DynamicArgs, argv: Vec<String>) -> Result<()> {
    let mut inputs = inputs(&a.data, &a.boot, argv);
    let trend = args::trend_label(&a.trend);
    inputs.trend = Some(trend.clone());
    let Prepared { panel, covariates, .. } = prepare(&a.data, None)?;
    let opts = EstimatorOptions { h: a.data.h, ..Default::default() };
    let est = estimate_average_effects_with(&panel, a.data.r, &opts)?;
    let mut warnings = est.diagnostics.warnings.clone();
    let dy = estimate_dynamic_effects_with(&panel, a.data.r, a.trend, &DynamicOptions { h: a.data.h, ..Default::default() })?;
    let bootstrap = bootstrap_report(&panel, a.data.r, &opts, &a.boot, &mut warnings)?;
    let dynamic = DynamicReport::new(&panel, trend, &dy);

    let csv_path = a.csv.clone().or_else(|| a.data.output.as_ref().map(|p| p.with_extension("csv")));
    if let Some(path) = csv_path {
        write_dynamic_csv(&path, &panel, &dynamic)?;
    }
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        command: "dynamic",
        version: env!("CARGO_PKG_VERSION"),
        inputs,
        panel: PanelInfo::new(&panel),
        falsification: None,
        covariates,
        estimate: EstimateReport::new(&panel, &est),
        bootstrap,
        dynamic: Some(dynamic),
        warnings,
    };
    write_json(a.data.output.as_deref(), &report)
}

fn write_dynamic_csv(path: &Path, panel: &Panel64, dy: &DynamicReport) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["period", "unit", "beta_hat", "tau_hat", "selected"])?;
    for p in &dy.periods {
        for (i, unit) in panel.unit_labels().iter().enumerate() {
            let selected = p.selected.iter().any(|s| s == unit);
            w.write_record([
                p.period.clone(),
                unit.clone(),
                p.beta_hat[i].to_string(),
                p.tau_hat[i].to_string(),
                selected.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    text.push('\n');
    match path {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, text)?;
        }
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}
