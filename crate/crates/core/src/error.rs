use std::fmt;

/// Pipeline stage that produced an error; used to label messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Input,
    FactorAnalysis,
    RobustRegression,
    Sigma,
    Selection,
    Refit,
    Weights,
    Covariates,
    Trend,
    Bootstrap,
    Simulation,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Step::Input => "input",
            Step::FactorAnalysis => "step 1 (factor analysis)",
            Step::RobustRegression => "step 2 (LTS regression)",
            Step::Sigma => "step 3 (noise scale)",
            Step::Selection => "step 3 (control selection)",
            Step::Refit => "step 4 (refit)",
            Step::Weights => "synthetic weights",
            Step::Covariates => "covariate adjustment",
            Step::Trend => "trend estimation",
            Step::Bootstrap => "bootstrap",
            Step::Simulation => "simulation",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{step}: {msg}")]
    Validation { step: Step, msg: String },

    #[error("parse error at data row {row}, column '{column}': {msg}")]
    Parse { row: usize, column: String, msg: String },

    #[error("{step}: {msg}")]
    Numerical { step: Step, msg: String },

    #[error("{step}: no convergence after {iterations} iterations (last log-likelihood {last_log_likelihood})")]
    NotConverged {
        step: Step,
        iterations: usize,
        last_log_likelihood: f64,
        /// Last loadings iterate, row-major N x r, on the outcome scale.
        last_loadings: Vec<f64>,
        last_uniquenesses: Vec<f64>,
    },

    #[error("{step}, period {period}: {source}")]
    AtPeriod {
        step: Step,
        period: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(step: Step, msg: impl Into<String>) -> Self {
        Error::Validation { step, msg: msg.into() }
    }

    pub(crate) fn numerical(step: Step, msg: impl Into<String>) -> Self {
        Error::Numerical { step, msg: msg.into() }
    }

    /// True for errors caused by bad input rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation { .. } | Error::Parse { .. } | Error::Io(_) | Error::Csv(_) => true,
            Error::AtPeriod { source, .. } => source.is_validation(),
            Error::Numerical { .. } | Error::NotConverged { .. } => false,
        }
    }

    /// Relabels an error with the pipeline step that was running.
    pub(crate) fn in_step(self, step: Step) -> Self {
        match self {
            Error::Validation { msg, .. } => Error::Validation { step, msg },
            Error::Numerical { msg, .. } => Error::Numerical { step, msg },
            Error::NotConverged { iterations, last_log_likelihood, last_loadings, last_uniquenesses, .. } => {
                Error::NotConverged { step, iterations, last_log_likelihood, last_loadings, last_uniquenesses }
            }
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
