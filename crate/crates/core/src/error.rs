use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward has already been run on this graph; record a new forward pass first")]
    BackwardTwice,

    #[error("optimizer step requested before gradients were populated by a backward pass")]
    GradientsNotReady,

    #[error("gradient check requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("batch of {got} samples is too small: pairwise kernel terms need a batch size of at least {min}")]
    BatchTooSmall { got: usize, min: usize },

    #[error("cannot split {layers} layers into {blocks} blocks")]
    Partition { layers: usize, blocks: usize },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("stage {stage} requires parameters for layer {layer} which have not been trained yet")]
    MissingParameters { stage: usize, layer: usize },

    #[error("no client can afford stage {stage}: requires {required} bytes, largest capacity is {largest} bytes")]
    EmptyEligiblePool { stage: usize, required: u64, largest: u64 },

    #[error("aggregation: {0}")]
    Aggregation(String),

    #[error("round {round}, client {client}, step {step}: training diverged (non-finite loss)")]
    Diverged { round: usize, client: usize, step: usize },

    #[error("round {round}: {source}")]
    Round { round: usize, source: Box<Error> },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e @ Error::Diverged { .. } => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
