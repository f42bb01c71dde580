use hsq_core::HsqError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] HsqError),
    /// A core error raised while reading or writing a named file.
    #[error("{path}: {source}")]
    File {
        path: String,
        module: &'static str,
        source: HsqError,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    /// A check ran to completion and its result exceeded the tolerance.
    #[error("tolerance failure: {0}")]
    Tolerance(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_CONTRACT: u8 = 4;
pub const EXIT_TOLERANCE: u8 = 5;

fn core_code(e: &HsqError) -> u8 {
    match e {
        HsqError::Config(_) => EXIT_CONFIG,
        HsqError::Io(_)
        | HsqError::Format(_)
        | HsqError::Ingestion { .. }
        | HsqError::Csv(_)
        | HsqError::Metric(_) => EXIT_INPUT,
        HsqError::Contract(_) | HsqError::MissingGradient(_) => EXIT_CONTRACT,
    }
}

fn core_module(e: &HsqError) -> &'static str {
    match e {
        HsqError::Format(_) | HsqError::Io(_) => "pyramid_io",
        HsqError::Ingestion { .. } => "projector",
        HsqError::Metric(_) | HsqError::Csv(_) => "metrics",
        HsqError::Config(_) => "config",
        HsqError::Contract(_) | HsqError::MissingGradient(_) => "numerics",
    }
}

impl CliError {
    pub fn in_file(path: impl AsRef<std::path::Path>, module: &'static str) -> impl FnOnce(HsqError) -> Self {
        let path = path.as_ref().display().to_string();
        move |source| CliError::File { path, module, source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) | CliError::File { source: e, .. } => core_code(e),
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_INPUT,
            CliError::Tolerance(_) => EXIT_TOLERANCE,
        }
    }

    /// The module the diagnostic originates from.
    pub fn module(&self) -> &'static str {
        match self {
            CliError::Core(e) => core_module(e),
            CliError::File { module, .. } => module,
            CliError::Config(_) | CliError::Io(_) | CliError::Tolerance(_) => "cli",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hsq_core::FormatError;

    #[test]
    fn codes_are_distinct_per_class() {
        let codes = [
            CliError::Config(String::new()).exit_code(),
            CliError::Core(FormatError::Malformed(String::new()).into()).exit_code(),
            CliError::Core(HsqError::Contract(String::new())).exit_code(),
            CliError::Tolerance(String::new()).exit_code(),
        ];
        assert_eq!(codes, [EXIT_CONFIG, EXIT_INPUT, EXIT_CONTRACT, EXIT_TOLERANCE]);
    }

    #[test]
    fn file_errors_keep_the_source_code() {
        let e = CliError::in_file("a.hsqf", "pyramid_io")(HsqError::Config("x".into()));
        assert_eq!(e.exit_code(), EXIT_CONFIG);
        assert!(e.to_string().starts_with("a.hsqf: "));
    }
}
