use std::fmt;
use std::path::Path;

pub const CONFIG: u8 = 2;
pub const IO: u8 = 3;
pub const DIVERGENCE: u8 = 4;
pub const LOW_SUPPORT: u8 = 5;
pub const INELIGIBLE: u8 = 6;
pub const EXPERIMENT: u8 = 7;

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(CONFIG, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(IO, format!("I/O error on {}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<cfalign::Error> for CliError {
    fn from(e: cfalign::Error) -> Self {
        use cfalign::Error as E;
        let code = match &e {
            E::Config(_) => CONFIG,
            E::Io { .. } | E::Format { .. } => IO,
            E::Divergence { .. } => DIVERGENCE,
            _ => EXPERIMENT,
        };
        CliError::new(code, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_exit_codes() {
        let cases = [
            (cfalign::Error::Config("x".into()), CONFIG),
            (
                cfalign::Error::Divergence {
                    epoch: 3,
                    detail: "nan".into(),
                },
                DIVERGENCE,
            ),
            (cfalign::Error::InsufficientSamples("x".into()), EXPERIMENT),
            (cfalign::Error::Degenerate("x".into()), EXPERIMENT),
        ];
        for (e, code) in cases {
            assert_eq!(CliError::from(e).code, code);
        }
    }
}
