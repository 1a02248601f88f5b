use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors across ingestion, sampling, modeling, training and inference.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("grid mismatch for {what}: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    GridMismatch {
        what: String,
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },

    #[error("georeferencing mismatch for {what}: {detail}")]
    GeoMismatch { what: String, detail: String },

    #[error("unknown label class value {value} in {context}")]
    UnknownLabelClass { value: String, context: String },

    #[error("duplicate month {month} in scene catalog")]
    DuplicateMonth { month: u8 },

    #[error("test split requested but catalog is missing scenes for months {missing:?}")]
    MissingTestScenes { missing: Vec<u8> },

    #[error("region {region} exceeds scene bounds {h}x{w}")]
    RegionOutOfBounds { region: String, h: usize, w: usize },

    #[error("region {region} of {h}x{w} is smaller than the patch size {size}")]
    RegionTooSmall {
        region: String,
        h: usize,
        w: usize,
        size: usize,
    },

    #[error("channel {channel} has zero standard deviation over valid training pixels")]
    DegenerateChannel { channel: usize },

    #[error("no valid pixels available: {context}")]
    NoValidPixels { context: String },

    #[error("could not draw a patch with >= {min_valid_fraction} valid fraction from {scene_id} {region} after {attempts} attempts")]
    PatchResampleExhausted {
        scene_id: String,
        region: String,
        min_valid_fraction: f64,
        attempts: u32,
    },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("tensor {name}: expected shape {expected:?}, got {got:?}")]
    TensorShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("pretrained weight file {file} is missing tensor {name}")]
    MissingTensor { file: PathBuf, name: String },

    #[error("checkpoint does not match requested configuration: {0}")]
    CheckpointMismatch(String),

    #[error("confusion matrix is empty (no valid pixels evaluated)")]
    EmptyConfusion,

    #[error("batch contains zero valid pixels")]
    DegenerateBatch,

    #[error("non-finite training loss at epoch {epoch}, batch {batch}, lr {lr:e}")]
    NonFiniteLoss { epoch: u32, batch: usize, lr: f64 },

    #[error("tile size {tile} must exceed twice the overlap {overlap}")]
    TileConfig { tile: usize, overlap: usize },

    #[error("single-pass inference over {h}x{w} would need ~{required_bytes} bytes (cap {cap_bytes}); use tiled mode")]
    SinglePassMemory {
        h: usize,
        w: usize,
        required_bytes: u64,
        cap_bytes: u64,
    },

    #[error("{path}: {source}")]
    FileIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported raster format in {path}: {detail}")]
    RasterFormat { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tiff(#[from] tiff::TiffError),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn file_io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::FileIo {
            path: path.into(),
            source,
        }
    }
}
