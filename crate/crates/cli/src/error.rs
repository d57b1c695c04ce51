use dsgd_core::LabError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("budget exceeded: {cells} cells requested, at most {limit} allowed")]
    BudgetExceeded { cells: usize, limit: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for violated modelling assumptions, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Lab(LabError::Disconnected { .. } | LabError::StepTooLarge { .. }) => 2,
            _ => 1,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(std::io::Error::other(e.to_string()))
    }
}
