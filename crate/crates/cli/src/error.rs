use std::fmt;

use space_fda::SpaceError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn io(path: &str, e: impl fmt::Display) -> Self {
        CliError::Data(format!("{path}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<SpaceError> for CliError {
    fn from(e: SpaceError) -> Self {
        let msg = e.to_string();
        match e {
            SpaceError::InvalidArgument(_) | SpaceError::BufferTooLarge { .. } => CliError::Usage(msg),
            SpaceError::InvalidData(_) | SpaceError::InsufficientData(_) => CliError::Data(msg),
            SpaceError::DegenerateFit { .. } => {
                CliError::Numerical(format!("{msg} (set h_mu / h_g explicitly to a larger value)"))
            }
            _ => CliError::Numerical(msg),
        }
    }
}
