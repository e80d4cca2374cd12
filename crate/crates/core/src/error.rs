use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({x}, {y}) lies outside the domain")]
    OutsideDomain { x: f64, y: f64 },

    #[error("depth {depth} is outside the boundary collar of width {collar}")]
    OutsideCollar { depth: f64, collar: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("compatibility condition #{index} violated (residual {residual:.3e})")]
    Compatibility { index: usize, residual: f64 },

    #[error("non-finite evaluation at t={t}, x=({x}, {y}), u={u}")]
    Evaluation { t: f64, x: f64, y: f64, u: f64 },

    #[error("solution blew up at t = {time} (max |u| = {max_abs:.3e})")]
    BlowUp { time: f64, max_abs: f64 },

    #[error("Picard iteration did not converge after {iterations} iterations (contraction ratio {ratio:.3e})")]
    Divergence { iterations: usize, ratio: f64 },

    #[error("unresolved: {msg}")]
    Resolution { msg: String, max_rho: Option<f64> },

    #[error("admissible range: {0}")]
    Range(String),

    #[error("missing samples: {0}")]
    Gap(String),

    #[error("input outside the admissible data class: {0}")]
    Restriction(String),

    #[error("at scale {scale}: {source}")]
    AtScale { scale: f64, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(String),
}

impl Error {
    /// Process exit code used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::AtScale { source, .. } => source.exit_code(),
            Error::BlowUp { .. } | Error::Divergence { .. } | Error::Evaluation { .. } => 3,
            Error::Resolution { .. } => 4,
            Error::Io(_) | Error::Csv(_) => 1,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::OutsideDomain { .. } => "outside_domain",
            Error::OutsideCollar { .. } => "outside_collar",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Geometry(_) => "geometry",
            Error::Compatibility { .. } => "compatibility",
            Error::Evaluation { .. } => "evaluation",
            Error::BlowUp { .. } => "blow_up",
            Error::Divergence { .. } => "divergence",
            Error::Resolution { .. } => "resolution",
            Error::Range(_) => "range",
            Error::Gap(_) => "gap",
            Error::Restriction(_) => "restriction",
            Error::AtScale { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
