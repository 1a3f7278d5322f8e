use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): {reason}")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        reason: &'static str,
    },

    #[error("degenerate anchor: width and height must be positive")]
    DegenerateAnchor,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("could not place {requested} objects in image {image_id} within {retries} attempts")]
    Overcrowded {
        image_id: u64,
        requested: usize,
        retries: usize,
    },

    #[error("category {category} appears in only {available} images, {requested} seed images requested")]
    InsufficientSeeds {
        category: u32,
        available: usize,
        requested: usize,
    },

    #[error("non-finite {component} (iteration {iteration}, epoch {epoch}, item {item})")]
    NonFinite {
        component: String,
        iteration: usize,
        epoch: usize,
        item: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("source detector {0}")]
    SourceDetector(&'static str),

    #[error("malformed {what} at line {line}: {message}")]
    Parse {
        what: &'static str,
        line: usize,
        message: String,
    },

    #[error("unsupported checkpoint format version {0}")]
    CheckpointVersion(u32),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
