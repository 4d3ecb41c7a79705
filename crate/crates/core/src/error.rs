use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid metric at site {site}: {reason}")]
    InvalidMetric { site: usize, reason: String },

    #[error("chart parameters out of range: {0}")]
    ChartOutOfRange(String),

    #[error("{op} does not support {reason}")]
    Unsupported { op: &'static str, reason: String },

    #[error("size mismatch: expected {expected}, got {actual} ({what})")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate spectrum: eigenvalue {index} = {value:e} (largest {max:e})")]
    DegenerateSpectrum { index: usize, value: f64, max: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "statistic bins cover only {coverage:.9} of the mass at theta = {theta}; \
         log-statistic range must include [{required_lo}, {required_hi}]"
    )]
    BinCoverage {
        theta: f64,
        coverage: f64,
        required_lo: f64,
        required_hi: f64,
    },

    #[error("fixed-point iteration did not converge after {iterations} iterations (last step {last_step:e})")]
    NotConverged {
        iterations: usize,
        last_step: f64,
        last_iterate: Vec<f64>,
    },

    #[error(
        "heat-kernel fit window is empty: lattice cutoff {lower:e} >= infrared scale {upper:e}; \
         refine to at least {required_extent} sites per axis at the same physical size"
    )]
    EmptyWindow {
        lower: f64,
        upper: f64,
        required_extent: usize,
    },

    #[error("fit window [{lo}, {hi}] lies outside the admissible range ({lower}, {upper})")]
    WindowOutOfRange {
        lo: f64,
        hi: f64,
        lower: f64,
        upper: f64,
    },

    #[error("Monte Carlo draws are degenerate: {0}")]
    DegenerateDraws(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
