use vidflow_core::Error;
use vidflow_planner::PlanError;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    /// The command ran but missed its target (loss threshold, tolerance).
    NotMet = 1,
    Infeasible = 2,
    /// Unreadable input, bad file format or an invalid configuration value.
    Input = 3,
    Divergence = 4,
}

impl Exit {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { exit: Exit::Input, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let exit = match e {
            Error::NonFinite { .. } => Exit::Divergence,
            _ => Exit::Input,
        };
        Self { exit, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::input(e.to_string())
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        let exit = match e {
            PlanError::NoFeasible { .. } => Exit::Infeasible,
            PlanError::Invalid { .. } => Exit::Input,
        };
        Self { exit, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
