use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("configuration error: {0}")]
    Config(String),

    /// A column the configuration requires is missing from the input header.
    #[error("schema error: required column `{column}` not found in header")]
    Schema { column: String },

    #[error("specification error: {0}")]
    Specification(String),

    #[error("identification error: {0}")]
    Identification(String),

    #[error("empty sample: {0}")]
    EmptySample(String),

    #[error("numerical error: {message} (last residual norm {last_residual:e})")]
    NonConvergence { message: String, last_residual: f64 },

    /// IRLS failed to converge; carries the deviance at each iteration.
    #[error("numerical error: {message} after {} iterations", trajectory.len())]
    Diverged { message: String, trajectory: Vec<f64> },

    /// The likelihood increases without bound along `direction`.
    #[error("separation detected along direction {}", summarize_direction(direction))]
    Separation { direction: Vec<(String, f64)> },

    #[error("inference error: {0}")]
    Inference(String),

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// The largest components of a separating direction, for messages.
fn summarize_direction(direction: &[(String, f64)]) -> String {
    const SHOWN: usize = 5;
    let mut parts: Vec<&(String, f64)> = direction.iter().collect();
    parts.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    let mut out: Vec<String> = parts.iter().take(SHOWN).map(|(n, v)| format!("{n} {v:+.3}")).collect();
    if parts.len() > SHOWN {
        out.push(format!("{} more", parts.len() - SHOWN));
    }
    format!("[{}]", out.join(", "))
}
