use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    /// An exponent `(u_n + v_m)/eps + ln k` went above the configured guard.
    #[error("exponent {exponent:.3} exceeds overflow guard {guard}{}", context_suffix(.context))]
    Overflow {
        exponent: f64,
        guard: f64,
        context: Option<String>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config validation failed:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    /// The ascent stopped early; the trace up to the failure is kept.
    #[error("solver aborted at iteration {iteration}: {cause}")]
    Aborted {
        iteration: u64,
        cause: Box<Error>,
        trace: Box<crate::mrbcd::RunTrace>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Attach iteration context to an overflow raised deep inside the objective.
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::Overflow {
                exponent, guard, ..
            } => Error::Overflow {
                exponent,
                guard,
                context: Some(ctx.into()),
            },
            other => other,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Overflow { .. } | Error::NonFinite(_) => true,
            Error::Aborted { cause, .. } => cause.is_numerical(),
            _ => false,
        }
    }
}
