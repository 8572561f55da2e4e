use std::fmt;

/// Errors produced by graph transforms, the tape, training and attacks.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible (also covers non-square inputs).
    Dimension(String),
    /// An edge flip does not match the current graph state.
    InconsistentFlip(String),
    /// A precondition of an operation was violated.
    Contract(String),
    /// A node mask selected zero nodes.
    DegenerateMask,
    /// Training diverged (non-finite loss) at the given epoch.
    TrainingFailure { epoch: usize },
    /// An attack budget exceeds the number of flippable pairs.
    InfeasibleBudget(String),
    /// Operation requires binary features and got something else.
    UnsupportedFeatures(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::InconsistentFlip(msg) => write!(f, "inconsistent flip: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::DegenerateMask => write!(f, "mask selects no nodes"),
            Error::TrainingFailure { epoch } => {
                write!(f, "training failure: non-finite loss at epoch {epoch}")
            }
            Error::InfeasibleBudget(msg) => write!(f, "infeasible budget: {msg}"),
            Error::UnsupportedFeatures(msg) => write!(f, "unsupported features: {msg}"),
        }
    }
}

impl std::error::Error for Error {}
