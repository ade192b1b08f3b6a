use diffmpt::gf2codes::CodeError;
use diffmpt::harness::HarnessError;
use diffmpt::model::ModelError;
use diffmpt::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Validation(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<CodeError> for CliError {
    fn from(e: CodeError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(io) => CliError::io("checkpoint", io),
            ModelError::Autodiff(a) => CliError::Numeric(a.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Io(io) => CliError::io("evaluation", io),
            HarnessError::Model(m) => m.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io(io) => CliError::io("training run", io),
            TrainError::Model(m) => m.into(),
            e @ (TrainError::NonFiniteLoss { .. } | TrainError::Autodiff(_)) => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(format!("config: {e}"))
    }
}
