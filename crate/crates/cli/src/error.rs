use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}, line {line}: {msg}")]
    ConfigLine { path: String, line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    /// A library failure, tagged with the module that raised it.
    #[error("{module}: {source}")]
    Model {
        module: &'static str,
        #[source]
        source: sofr_transfer::Error,
    },
}

impl CliError {
    pub fn model(module: &'static str) -> impl FnOnce(sofr_transfer::Error) -> CliError {
        move |source| CliError::Model { module, source }
    }

    /// 1 for numerical failures, 2 for configuration, input and output problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Model { source, .. } if source.is_numerical() => 1,
            _ => 2,
        }
    }
}
