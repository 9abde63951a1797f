//! Error type shared across the pipeline, with the process exit-code mapping
//! used by the CLI: validation and I/O problems exit 1, backend transport and
//! protocol failures exit 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Filesystem problem, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A line-delimited input file contained a malformed or invalid line.
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    /// Input violated a documented precondition or invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// The backend was unreachable after all retry attempts.
    #[error("transport error{}: {msg}", fingerprint_suffix(.fingerprint))]
    Transport {
        fingerprint: Option<String>,
        msg: String,
    },

    /// The backend answered with a non-2xx status.
    #[error("protocol error: status {status}: {excerpt}")]
    Protocol { status: u16, excerpt: String },

    /// The backend produced no usable completion for this request.
    #[error("empty output for request {fingerprint}")]
    EmptyOutput { fingerprint: String },

    /// Training produced a non-finite loss or gradient.
    #[error("non-finite value at step {step}: {detail}")]
    Numeric { step: usize, detail: String },
}

fn fingerprint_suffix(fp: &Option<String>) -> String {
    match fp {
        Some(f) => format!(" (request {f})"),
        None => String::new(),
    }
}

impl Error {
    /// Wrap an I/O error with the path it occurred on.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures that indicate the backend (not the input) is at fault.
    pub fn is_transport(&self) -> bool {
        matches!(self, Error::Transport { .. } | Error::Protocol { .. })
    }

    /// Process exit code for this error: 2 for backend trouble, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_transport() {
            2
        } else {
            1
        }
    }
}
