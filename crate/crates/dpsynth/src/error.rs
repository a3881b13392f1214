use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("degenerate generative model: {accepted} accepted draws in a window of {window}")]
    DegenerateModel { accepted: u64, window: u64 },
    #[error("singular regression design: {0}")]
    SingularDesign(String),
    #[error("projection infeasible: {0}")]
    ProjectionInfeasible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by an invalid schema, config file, or call
    /// arguments, as opposed to runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Schema(_) | Error::Config(_) | Error::Argument(_)
        )
    }
}
