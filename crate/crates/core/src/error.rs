use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("loss must be a 1x1 scalar, got {0}x{1}")]
    NotScalar(usize, usize),
    #[error("insufficient data: need {needed} time steps, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate cluster {0}: soft cluster frequency is zero")]
    DegenerateCluster(usize),
    #[error("optimization diverged at step {step}: loss is not finite")]
    Divergence { step: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown node id `{0}`")]
    UnknownNode(String),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape { op, lhs, rhs }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
