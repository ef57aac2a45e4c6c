use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate lane: crosses {rows} grid row(s), at least 2 required")]
    DegenerateLane { rows: usize },

    #[error("invalid lane: {0}")]
    InvalidLane(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("infeasible configuration: {0}")]
    Config(String),

    #[error("invalid value for `{field}`: {msg}")]
    ConfigField { field: String, msg: String },

    #[error("non-finite loss at step {step}: {components}")]
    NonFiniteLoss { step: u64, components: String },

    #[error("refusing to continue: {0}")]
    Refused(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
