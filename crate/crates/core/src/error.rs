use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "static back-gate voltage {required:.4} V exceeds the DAC range ±{v_max:.4} V; \
         raise crossbar.dac_v_max or allow residual digital scaling"
    )]
    DacRange { required: f64, v_max: f64 },

    #[error("fit failed: {0}")]
    Fit(#[from] FitError),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("underdetermined: need at least 3 distinct back-gate voltages, got {0}")]
    Underdetermined(usize),
    #[error("singular normal equations")]
    Singular,
    #[error("negative fitted coefficient: alpha = {alpha:.6}, m = {m:.6}")]
    NegativeCoefficient { alpha: f64, m: f64 },
    #[error("no real (alpha, M) pair explains the fitted polynomial (discriminant {0:.3e})")]
    NoRealRoot(f64),
}

impl Error {
    pub fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
