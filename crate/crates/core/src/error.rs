use thiserror::Error;

/// Which end of a support or parameter domain a problem was detected at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    Lower,
    Upper,
}

impl std::fmt::Display for Tail {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tail::Lower => f.write_str("lower"),
            Tail::Upper => f.write_str("upper"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Observation outside the support of a family.
    #[error("observation {x} outside support of family `{family}`")]
    Domain { family: String, x: f64 },

    /// Parameter vector outside its box, or of the wrong dimension.
    #[error("invalid parameters for `{family}`: {reason}")]
    Parameter { family: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The integrand is not dominated at the truncation boundary: the
    /// expectation is infinite for the requested exponent.
    #[error("divergent {tail} tail: {context}")]
    Divergence { tail: Tail, context: String },

    #[error("numerical failure: {0}")]
    Numeric(String),

    /// An optimizer did not converge; `incumbent` is the best point found.
    #[error("optimization did not converge: {reason}")]
    Optimization {
        reason: String,
        incumbent: Option<(Vec<f64>, f64)>,
    },

    /// A rate-function argument outside the attainable range of the
    /// derivative of the log-MGF.
    #[error("argument {t} outside attainable interval [{lo}, {hi}]")]
    Range { t: f64, lo: f64, hi: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    /// Failure while processing one pair of a multi-family comparison.
    #[error("family pair ({i}, {j}): {source}")]
    Pair {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("not enough positive estimates to fit a slope ({0} usable)")]
    Fit(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(family: &str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            family: family.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
