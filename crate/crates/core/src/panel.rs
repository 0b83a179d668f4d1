//! Outcome panels, covariate panels and wide-format CSV ingestion.
//!
//! A panel stores an `N x T` outcome matrix whose first row is the treated
//! unit. The treatment indicator is the step `1(t > t0)` and is never stored.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, Step};
use crate::scalar::{count, Scalar};

/// Header names recognised as a period-label column.
const PERIOD_HEADERS: [&str; 6] = ["", "period", "time", "date", "week", "t"];

#[derive(Debug, Clone, PartialEq)]
pub struct Panel<T: Scalar> {
    outcomes: DMatrix<T>,
    t0: usize,
    unit_labels: Vec<String>,
    period_labels: Option<Vec<String>>,
}

impl<T: Scalar> Panel<T> {
    /// Builds a panel, checking shape, finiteness and `1 <= t0 < T`.
    pub fn new(
        outcomes: DMatrix<T>,
        t0: usize,
        unit_labels: Vec<String>,
        period_labels: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, t) = outcomes.shape();
        if n < 3 {
            return Err(Error::validation(Step::Input, format!("need at least 3 units, got {n}")));
        }
        if t0 < 1 || t0 >= t {
            return Err(Error::validation(
                Step::Input,
                format!("t0 = {t0} out of range; need 1 <= t0 <= {}", t.saturating_sub(1)),
            ));
        }
        if unit_labels.len() != n {
            return Err(Error::validation(
                Step::Input,
                format!("{} unit labels for {n} units", unit_labels.len()),
            ));
        }
        let mut seen = HashSet::new();
        for label in &unit_labels {
            if !seen.insert(label.as_str()) {
                return Err(Error::validation(Step::Input, format!("duplicate unit label '{label}'")));
            }
        }
        if let Some(p) = &period_labels {
            if p.len() != t {
                return Err(Error::validation(
                    Step::Input,
                    format!("{} period labels for {t} periods", p.len()),
                ));
            }
        }
        if let Some((idx, _)) = outcomes.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (i, j) = (idx % n, idx / n);
            return Err(Error::validation(
                Step::Input,
                format!("non-finite outcome for unit '{}' at period {}", unit_labels[i], j + 1),
            ));
        }
        Ok(Self { outcomes, t0, unit_labels, period_labels })
    }

    /// Panel with generated labels `unit1..unitN`.
    pub fn from_matrix(outcomes: DMatrix<T>, t0: usize) -> Result<Self> {
        let labels = (1..=outcomes.nrows()).map(|i| format!("unit{i}")).collect();
        Self::new(outcomes, t0, labels, None)
    }

    pub fn outcomes(&self) -> &DMatrix<T> {
        &self.outcomes
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn n_units(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn n_post(&self) -> usize {
        self.n_periods() - self.t0
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn period_labels(&self) -> Option<&[String]> {
        self.period_labels.as_deref()
    }

    /// Pre-intervention share `t0 / T`.
    pub fn rho(&self) -> f64 {
        self.t0 as f64 / self.n_periods() as f64
    }

    /// Replaces the outcome matrix, keeping labels and `t0`.
    pub fn with_outcomes(&self, outcomes: DMatrix<T>) -> Result<Self> {
        if outcomes.shape() != self.outcomes.shape() {
            return Err(Error::validation(Step::Input, "replacement outcomes have a different shape"));
        }
        Self::new(outcomes, self.t0, self.unit_labels.clone(), self.period_labels.clone())
    }

    /// Panel assembled from the given period indices (columns), in order.
    /// The first `t0` indices form the new pre-period.
    pub fn resampled(&self, periods: &[usize], t0: usize) -> Result<Self> {
        let outcomes = self.outcomes.select_columns(periods);
        Self::new(outcomes, t0, self.unit_labels.clone(), None)
    }
}

/// Covariates aligned with a panel's periods: `p x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariatePanel<T: Scalar> {
    covariates: DMatrix<T>,
    names: Vec<String>,
}

impl<T: Scalar> CovariatePanel<T> {
    pub fn new(covariates: DMatrix<T>, names: Vec<String>) -> Result<Self> {
        if covariates.nrows() == 0 {
            return Err(Error::validation(Step::Covariates, "need at least one covariate"));
        }
        if names.len() != covariates.nrows() {
            return Err(Error::validation(Step::Covariates, "covariate names do not match rows"));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(Step::Covariates, "non-finite covariate value"));
        }
        Ok(Self { covariates, names })
    }

    pub fn covariates(&self) -> &DMatrix<T> {
        &self.covariates
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.covariates.ncols()
    }
}

/// Pre/post means and their difference for every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMeans<T: Scalar> {
    pub pre: DVector<T>,
    pub post: DVector<T>,
    pub diff: DVector<T>,
}

pub fn split_means<T: Scalar>(panel: &Panel<T>) -> SplitMeans<T> {
    let y = panel.outcomes();
    let t0 = panel.t0();
    let pre = y.columns(0, t0).column_sum() / count::<T>(t0);
    let post = y.columns(t0, panel.n_post()).column_sum() / count::<T>(panel.n_post());
    let diff = &post - &pre;
    SplitMeans { pre, post, diff }
}

/// Pre-intervention sub-panel with a fake intervention after `placebo_t0`.
pub fn placebo_split<T: Scalar>(panel: &Panel<T>, placebo_t0: usize) -> Result<Panel<T>> {
    if placebo_t0 >= panel.t0() {
        return Err(Error::validation(
            Step::Input,
            format!("placebo t0 = {placebo_t0} must be smaller than t0 = {}", panel.t0()),
        ));
    }
    let t0 = panel.t0();
    let outcomes = panel.outcomes().columns(0, t0).into_owned();
    let periods = panel.period_labels().map(|p| p[..t0].to_vec());
    Panel::new(outcomes, placebo_t0, panel.unit_labels().to_vec(), periods)
}

/// Raw wide table: optional period labels, column names, values (rows = periods).
struct WideTable<T> {
    period_labels: Option<Vec<String>>,
    names: Vec<String>,
    values: Vec<Vec<T>>,
}

fn read_wide<T: Scalar, R: Read>(reader: R) -> Result<WideTable<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    if headers.is_empty() || records.is_empty() {
        return Err(Error::validation(Step::Input, "empty CSV"));
    }
    let first_numeric = records.iter().all(|r| r.get(0).is_some_and(|v| v.parse::<f64>().is_ok()));
    let has_period_col = PERIOD_HEADERS.contains(&headers[0].to_ascii_lowercase().as_str()) || !first_numeric;
    let skip = usize::from(has_period_col);
    let names: Vec<String> = headers[skip..].to_vec();
    if names.is_empty() {
        return Err(Error::validation(Step::Input, "CSV has no data columns"));
    }
    let mut period_labels = has_period_col.then(Vec::new);
    let mut values = Vec::with_capacity(records.len());
    for (row_idx, rec) in records.iter().enumerate() {
        let row = row_idx + 1;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::from("*"),
                msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        if let Some(p) = period_labels.as_mut() {
            p.push(rec[0].to_owned());
        }
        let mut parsed = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            let cell = &rec[k + skip];
            if cell.is_empty() {
                return Err(Error::Parse { row, column: name.clone(), msg: "missing value".into() });
            }
            let v: T = cell.parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                msg: format!("not a number: '{cell}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, column: name.clone(), msg: format!("non-finite value '{cell}'") });
            }
            parsed.push(v);
        }
        values.push(parsed);
    }
    Ok(WideTable { period_labels, names, values })
}

/// Reads a wide-format panel (rows = periods, one column per unit) and moves
/// the treated unit to the first row.
pub fn read_panel<T: Scalar, R: Read>(reader: R, t0: usize, treated: &str) -> Result<Panel<T>> {
    let table = read_wide::<T, _>(reader)?;
    let mut seen = HashSet::new();
    for name in &table.names {
        if !seen.insert(name.as_str()) {
            return Err(Error::validation(Step::Input, format!("duplicate unit label '{name}'")));
        }
    }
    let treated_col = table
        .names
        .iter()
        .position(|n| n == treated)
        .ok_or_else(|| Error::validation(Step::Input, format!("treated unit '{treated}' not found in header")))?;
    let order: Vec<usize> =
        std::iter::once(treated_col).chain((0..table.names.len()).filter(|&j| j != treated_col)).collect();
    let n_periods = table.values.len();
    let outcomes = DMatrix::from_fn(order.len(), n_periods, |i, t| table.values[t][order[i]]);
    let labels = order.iter().map(|&j| table.names[j].clone()).collect();
    Panel::new(outcomes, t0, labels, table.period_labels)
}

pub fn load_panel<T: Scalar>(path: impl AsRef<Path>, t0: usize, treated: &str) -> Result<Panel<T>> {
    let file = std::fs::File::open(path)?;
    read_panel(file, t0, treated)
}

/// Reads a covariate CSV (same layout as a panel, one column per covariate).
pub fn read_covariates<T: Scalar, R: Read>(reader: R) -> Result<CovariatePanel<T>> {
    let table = read_wide::<T, _>(reader)?;
    let p = table.names.len();
    let covariates = DMatrix::from_fn(p, table.values.len(), |i, t| table.values[t][i]);
    CovariatePanel::new(covariates, table.names)
}

pub fn load_covariates<T: Scalar>(path: impl AsRef<Path>) -> Result<CovariatePanel<T>> {
    let file = std::fs::File::open(path)?;
    read_covariates(file)
}

/// Writes the panel in the wide layout read by [`read_panel`]. Values use
/// the shortest representation that parses back to the same number.
pub fn write_panel<T: Scalar, W: Write>(panel: &Panel<T>, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![String::from("period")];
    header.extend(panel.unit_labels().iter().cloned());
    wtr.write_record(&header)?;
    for t in 0..panel.n_periods() {
        let label = panel.period_labels().map_or_else(|| (t + 1).to_string(), |p| p[t].clone());
        let mut row = vec![label];
        row.extend(panel.outcomes().column(t).iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
