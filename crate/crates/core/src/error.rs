use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension did not match what the operation requires.
    #[error("{op}: dimension `{dim}` expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: {detail}")]
    Geometry { op: &'static str, detail: String },

    #[error("layer `{layer}`: unsupported layer kind `{kind}`")]
    UnsupportedLayer { layer: String, kind: String },

    #[error("layer `{layer}`: {blob} blob {detail}")]
    MissingBlob {
        layer: String,
        blob: &'static str,
        detail: String,
    },

    #[error("layer `{layer}`: {blob} blob has shape {found:?}, expected {expected:?}")]
    BlobShape {
        layer: String,
        blob: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("layer `{layer}`: shape chain broken, {detail}")]
    ShapeChain { layer: String, detail: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("no layer named `{0}`")]
    UnknownLayer(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The score to be redistributed is not positive; nothing to explain.
    #[error("target {target} has non-positive score {score}")]
    NonPositiveScore { target: String, score: f32 },

    #[error("layer `{layer}` neuron {neuron} is inactive (value {value})")]
    InactiveNeuron { layer: String, neuron: usize, value: f32 },

    #[error("non-finite relevance produced at layer `{layer}`")]
    NonFinite { layer: String },

    #[error("trace does not belong to this model: {0}")]
    TraceMismatch(String),

    #[error("annotations line {line}: {detail}")]
    Annotation { line: usize, detail: String },

    #[error("image `{path}`: {detail}")]
    Image { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for refusals caused by the numbers themselves rather than bad input
    /// files or arguments.
    pub fn is_numerical_refusal(&self) -> bool {
        matches!(
            self,
            Error::NonPositiveScore { .. } | Error::InactiveNeuron { .. } | Error::NonFinite { .. }
        )
    }
}
