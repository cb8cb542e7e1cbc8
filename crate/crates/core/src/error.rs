use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("missing file referenced by manifest: {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("pose projects to zero visible pixels: {0}")]
    DegeneratePose(String),

    #[error("crop {crop_w}x{crop_h} exceeds image {width}x{height}")]
    CropTooLarge {
        crop_w: usize,
        crop_h: usize,
        width: usize,
        height: usize,
    },

    #[error("transform schedule is empty")]
    EmptySchedule,

    #[error("no manifest entries for weighted pitch {0} deg")]
    EmptyPitchClass(f64),

    #[error("layer `{0}` is not exposed by the victim")]
    LayerNotExposed(String),

    #[error("victim `{0}` is unavailable")]
    VictimUnavailable(String),

    #[error("checkpoint version {found} does not match expected {expected}")]
    Version { expected: u32, found: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}; state dumped to {dump:?}")]
    NonFiniteLoss {
        iteration: u64,
        dump: Option<PathBuf>,
    },

    #[error("text is empty after tokenization")]
    EmptyText,

    #[error("judge unavailable after {attempts} attempts: {reason}")]
    JudgeUnavailable { attempts: u32, reason: String },

    #[error("could not parse judge reply: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
