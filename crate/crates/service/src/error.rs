#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("database unreachable: {0}")]
    Unreachable(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("referential error: {0}")]
    Referential(String),

    #[error("database error: {0}")]
    Db(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("report rendering failed: {0}")]
    Pdf(String),

    #[error(transparent)]
    Core(#[from] anemia_core::error::Error),
}

impl From<rusqlite::Error> for ServiceError {
    fn from(e: rusqlite::Error) -> Self {
        ServiceError::Db(e.to_string())
    }
}

impl From<postgres::Error> for ServiceError {
    fn from(e: postgres::Error) -> Self {
        ServiceError::Db(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;
