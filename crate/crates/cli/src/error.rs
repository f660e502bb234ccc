use std::fmt;

use nestdrug_core::attribution::AttributionError;
use nestdrug_core::audit::AuditError;
use nestdrug_core::datasets::DatasetError;
use nestdrug_core::dmta::DmtaError;
use nestdrug_core::fingerprint::FingerprintError;
use nestdrug_core::molgraph::SmilesError;
use nestdrug_core::nestmodel::ModelError;
use nestdrug_core::training::TrainError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_GATE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_INTERNAL: i32 = 70;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

pub fn data(e: impl fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

pub fn internal(e: impl fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SmilesError> for CliError {
    fn from(e: SmilesError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FingerprintError> for CliError {
    fn from(e: FingerprintError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AuditError> for CliError {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::EmptySet(_) | AuditError::TooFewTargets(_) | AuditError::Dataset(_) => data(e),
            _ => internal(e),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_)
            | ModelError::IdOutOfRange { .. }
            | ModelError::UnknownTask(_)
            | ModelError::EmptyMolecule
            | ModelError::Checkpoint(_) => data(e),
            _ => internal(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyDataset | TrainError::InsufficientSupport(_) | TrainError::Dataset(_) => data(e),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => internal(e),
        }
    }
}

impl From<DmtaError> for CliError {
    fn from(e: DmtaError) -> Self {
        match e {
            DmtaError::EmptyPool => data(e),
            DmtaError::Config(_) => CliError::Usage(e.to_string()),
            _ => internal(e),
        }
    }
}

impl From<AttributionError> for CliError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::StepsTooFew(_) | AttributionError::TooFewInputs(_) => CliError::Usage(e.to_string()),
            AttributionError::Model(m) => m.into(),
            _ => internal(e),
        }
    }
}
