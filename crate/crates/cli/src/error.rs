use std::fmt;

use scir_core::config::ConfigError;
use scir_core::dataset::DatasetError;
use scir_core::engine::EngineError;
use scir_core::eval::EvalError;
use scir_core::jsonl::JsonlError;
use scir_core::mbsc::MbscError;

/// A failure reported as one line: `error[Category]: message`.
#[derive(Debug)]
pub struct Failure {
    pub category: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(category: &'static str, message: impl fmt::Display) -> Self {
        Self {
            category,
            message: message.to_string(),
        }
    }

    pub fn config(message: impl fmt::Display) -> Self {
        Self::new("ConfigInvalid", message)
    }

    pub fn io(message: impl fmt::Display) -> Self {
        Self::new("IoFailure", message)
    }

    pub fn exit_code(&self) -> i32 {
        match self.category {
            "ConfigInvalid" | "TemplateInvalid" => 2,
            "IoFailure" => 3,
            _ => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self
            .message
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        write!(f, "error[{}]: {}", self.category, one_line)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::io(e),
            ConfigError::Invalid(_) => Self::config(e),
        }
    }
}

impl From<JsonlError> for Failure {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { .. } => Self::io(e),
            JsonlError::Json { .. } => Self::new("InputInvalid", e),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => Self::io(e),
            DatasetError::DuplicateId { .. } => Self::new("DuplicateId", e),
            DatasetError::Row { .. } => Self::new("DatasetInvalid", e),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let category = match &e {
            EngineError::DuplicateId(_) => "DuplicateId",
            EngineError::InvalidItem { .. } => "DatasetInvalid",
            EngineError::MissingGold(_) => "MissingGold",
            EngineError::Prompt { .. } => "TemplateInvalid",
            EngineError::ZeroParallelism => "ConfigInvalid",
            EngineError::Pool(_) => "WorkerPool",
        };
        Self::new(category, e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let category = match &e {
            EvalError::TaskMismatch(_) => "TaskMismatch",
            EvalError::MissingGold(_) => "MissingGold",
            EvalError::IncompleteTrace { .. } => "TraceIncomplete",
        };
        Self::new(category, e)
    }
}

impl From<MbscError> for Failure {
    fn from(e: MbscError) -> Self {
        match e {
            MbscError::MissingGold(_) => Self::new("MissingGold", e),
            MbscError::TaskMismatch(_) => Self::new("TaskMismatch", e),
            MbscError::UnresolvedId { .. } => Self::new("UnresolvedId", e),
            MbscError::Dataset(d) => d.into(),
            MbscError::Io { .. } => Self::io(e),
        }
    }
}
