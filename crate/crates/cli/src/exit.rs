use std::fmt;

pub const CONFIG: i32 = 2;
pub const DATA: i32 = 3;
pub const NUMERIC: i32 = 4;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn config(msg: impl fmt::Display) -> Self {
        CliError {
            code: CONFIG,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        CliError {
            code: DATA,
            error: anyhow::anyhow!("{msg}"),
        }
    }
}

pub fn code_for(e: &tlkit::Error) -> i32 {
    use tlkit::Error::*;
    match e {
        Validation(_) | Unsupported(_) | Parameter { .. } | Dimension(_) | Layer { .. } => CONFIG,
        Data(_) | Format(_) | Io { .. } | Json(_) => DATA,
        NonFinite { .. } => NUMERIC,
    }
}

impl From<tlkit::Error> for CliError {
    fn from(e: tlkit::Error) -> Self {
        CliError {
            code: code_for(&e),
            error: e.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}
