use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite input to {0}")]
    NumericInput(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("class token (index 0) cannot be pruned in layer {layer}")]
    ClassTokenProtected { layer: usize },

    #[error("layer {layer} would be left with no attention heads")]
    DegenerateLayer { layer: usize },

    #[error("not calibrated: {0}")]
    NotCalibrated(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible pruning plan: wanted {wanted} units, only {available} eligible (binding layers: {binding_layers:?})")]
    InfeasiblePlan {
        wanted: usize,
        available: usize,
        binding_layers: Vec<usize>,
    },

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
