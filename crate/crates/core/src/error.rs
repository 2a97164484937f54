use thiserror::Error;

/// Errors shared across the simulator and attack engine.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in layer {layer} during {context}")]
    NonFinite { layer: usize, context: &'static str },

    #[error("downstream gating is not input-independent over the feature box (layer {0})")]
    GatingNotFixed(usize),

    #[error("degenerate path gain at neuron {0}")]
    DegenerateGain(usize),

    #[error("slice coefficient {0:e} is below the recovery floor")]
    DegenerateCoefficient(f64),

    #[error("target bisection bracket failed over [{lo}, {hi}]")]
    TargetRange { lo: f64, hi: f64 },

    #[error("update reports zero local steps")]
    ZeroSteps,

    #[error("csv error at line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
