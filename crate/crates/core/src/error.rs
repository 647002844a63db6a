use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("no decodable images found under {0}")]
    EmptyDataset(PathBuf),

    #[error("the {0} split is empty")]
    EmptySplit(&'static str),

    #[error("class {0} has no samples, cannot compute inverse-frequency weight")]
    EmptyClass(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("pretrained backbone weights unavailable: {0}")]
    PretrainedUnavailable(String),

    #[error("AUC is undefined when only one class is present")]
    SingleClass,

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("torch error: {0}")]
    Torch(#[from] tch::TchError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
