use std::path::{Path, PathBuf};

use otflow_core::datasets::DataError;
use otflow_core::diffcore::DiffError;
use otflow_core::flows::FlowError;
use otflow_core::losstrain::{LossError, TrainError};
use otflow_core::metrics::MetricsError;
use otflow_core::otoracle::OracleError;
use otflow_core::swdist::SwError;
use thiserror::Error;

/// Command failure, grouped by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io { .. } => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

fn diff_is_numeric(e: &DiffError) -> bool {
    matches!(e, DiffError::NonFinite { .. } | DiffError::NonFiniteGradient(_))
}

fn flow_is_numeric(e: &FlowError) -> bool {
    match e {
        FlowError::Unit { source, .. } => diff_is_numeric(source),
        FlowError::Diff(d) => diff_is_numeric(d),
        _ => false,
    }
}

fn classify(numeric: bool, msg: String) -> CliError {
    if numeric {
        CliError::Numeric(msg)
    } else {
        CliError::Validation(msg)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } => CliError::Io { path: path.into(), source },
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<DiffError> for CliError {
    fn from(e: DiffError) -> Self {
        classify(diff_is_numeric(&e), e.to_string())
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Data(d) => d.into(),
            other => classify(flow_is_numeric(&other), other.to_string()),
        }
    }
}

impl From<SwError> for CliError {
    fn from(e: SwError) -> Self {
        let numeric = matches!(&e, SwError::Diff(d) if diff_is_numeric(d));
        classify(numeric, e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        classify(matches!(e, OracleError::NoConvergence(..)), e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        let numeric = match &e {
            LossError::Flow(f) => flow_is_numeric(f),
            LossError::Diff(d) => diff_is_numeric(d),
            LossError::Sliced(SwError::Diff(d)) => diff_is_numeric(d),
            _ => false,
        };
        classify(numeric, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Loss(l) => l.into(),
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Flow(f) => f.into(),
            MetricsError::Oracle(o) => o.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}
