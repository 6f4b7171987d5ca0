use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes surfaced by the engine. The CLI maps each class onto a
/// fixed exit code, see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// Model description, shapes, flags or tap selections are inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or truncated input data. `offset` is the byte offset into
    /// the source (or the line number for text formats) when known.
    #[error("data error{}: {message}", location(.offset))]
    Data { message: String, offset: Option<u64> },

    /// API misuse at runtime, e.g. running backward twice on one tape.
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or infinity showed up in an activation or gradient.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn location(offset: &Option<u64>) -> String {
    match offset {
        Some(o) => format!(" at byte {o}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data { message: msg.into(), offset: None }
    }

    pub(crate) fn data_at(msg: impl Into<String>, offset: u64) -> Self {
        Error::Data { message: msg.into(), offset: Some(offset) }
    }

    /// Process exit code for this error: 2 for configuration and usage
    /// problems, 3 for anything wrong with the data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Data { .. } | Error::Numeric(_) | Error::Io(_) => 3,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line());
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            kind => Error::Data {
                message: match line {
                    Some(l) => format!("malformed CSV at line {l}: {kind:?}"),
                    None => format!("malformed CSV: {kind:?}"),
                },
                offset: None,
            },
        }
    }
}
