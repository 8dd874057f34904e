use latemu_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` requires missing input {missing}; run `{producer}` first")]
    Dependency { stage: String, missing: String, producer: String },
    #[error("numerical failure in {stage}: {detail}")]
    Numerical { stage: String, detail: String },
    #[error("provenance mismatch: {0}")]
    Provenance(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn format(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.as_ref().display().to_string(), detail: detail.into() }
    }

    pub fn numerical(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical { stage: stage.into(), detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
