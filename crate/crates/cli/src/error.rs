use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lagrow::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt checkpoint {}: {msg}", path.display())]
    Corrupt { path: PathBuf, msg: String },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn corrupt(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Corrupt { path: path.to_path_buf(), msg: msg.into() }
    }

    /// Process exit status: 2 config, 3 data, 4 i/o, 5 race, 6 corrupt
    /// checkpoint, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use lagrow::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Corrupt { .. } => 6,
            CliError::Core(e) => match e {
                E::Config(_) | E::Operator(_) | E::Mapping(_) => 2,
                E::Data(_) | E::Precondition(_) | E::UndefinedCorrelation(_) | E::DegenerateRange(_) => 3,
                E::Io(_) => 4,
                E::Race(_) => 5,
                E::Checkpoint(_) | E::StateCorruption(_) => 6,
            },
        }
    }
}

/// Attach a path to an I/O error.
pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| CliError::Io { path: path.to_path_buf(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_per_family() {
        let codes = [
            CliError::config("x").exit_code(),
            CliError::data("x").exit_code(),
            CliError::Io { path: "p".into(), source: std::io::Error::other("x") }.exit_code(),
            CliError::Core(lagrow::Error::Race("x".into())).exit_code(),
            CliError::corrupt(Path::new("p"), "x").exit_code(),
        ];
        assert_eq!(codes, [2, 3, 4, 5, 6]);
        assert_eq!(CliError::Core(lagrow::Error::Operator("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(lagrow::Error::Checkpoint("x".into())).exit_code(), 6);
    }
}
