use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("missing artifact {}: run `semrec {command}` first", .artifact.display())]
    Dependency { artifact: PathBuf, command: &'static str },

    #[error(transparent)]
    Core(#[from] semrec::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        use semrec::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } | CliError::Dependency { .. } => 1,
            CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) => 1,
                E::Numeric { .. } | E::UndefinedMetric(_) => 3,
                E::Parse { .. }
                | E::Schema(_)
                | E::Input(_)
                | E::Degenerate(_)
                | E::MissingSemId(_)
                | E::Calibration(_)
                | E::Internal(_)
                | E::Io(_) => 2,
            },
        }
    }
}
