use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum DebutError {
    #[error("invalid factor signature (p={p}, q={q}, r={r}, s={s}, t={t}): {reason}")]
    InvalidSignature {
        p: usize,
        q: usize,
        r: usize,
        s: usize,
        t: usize,
        reason: &'static str,
    },

    #[error("value array has length {got}, expected {expected}")]
    ValueLengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("empty chain")]
    EmptyChain,

    /// Adjacent factors do not compose (`q_{i+1} != p_i`). `factor` is 1-based.
    #[error("ShapeChainBreak at factor {factor}")]
    ShapeChainBreak { factor: usize },

    /// The diagonal-size recursion or the single-block condition of the last
    /// factor fails. `factor` is 1-based.
    #[error("TRecursionBreak at factor {factor}")]
    TRecursionBreak { factor: usize },

    #[error("unknown initialization scheme `{0}`")]
    UnknownScheme(String),

    #[error("unsupported channel ratio C_o/C_i = {c_out}/{c_in} after power-of-two rounding")]
    UnsupportedRatio { c_in: usize, c_out: usize },

    #[error("unsupported kernel size {0} for generation (expected 1, 3, 5 or 7)")]
    UnsupportedKernel(usize),

    #[error("InfeasibleStage3: halving-stage count {count} is negative")]
    InfeasibleStage3 { count: i64 },

    #[error("NonIntegerBulge: {0}")]
    NonIntegerBulge(String),

    #[error("PoolExhausted: no pool entry fits factor {factor} ({p}x{q}, t={t})")]
    PoolExhausted {
        factor: usize,
        p: usize,
        q: usize,
        t: usize,
    },

    #[error("FinalFactorInfeasible: t={t} does not divide the final factor {p}x{q}")]
    FinalFactorInfeasible { p: usize, q: usize, t: usize },

    #[error("NonIntegralOutput: ({input} + 2*{padding} - {k}) is not a multiple of stride {stride}")]
    NonIntegralOutput {
        input: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },

    #[error("SingularSystem while updating factor {factor}")]
    SingularSystem { factor: usize },

    #[error("chain factor {factor} carries no values")]
    MissingValues { factor: usize },

    #[error("invalid option: {0}")]
    InvalidOption(String),

    #[error("layer `{name}`: {source}")]
    Layer {
        name: String,
        #[source]
        source: Box<DebutError>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DebutError {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        DebutError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures of the numerical routines rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            DebutError::SingularSystem { .. } => true,
            DebutError::Layer { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, DebutError>;
