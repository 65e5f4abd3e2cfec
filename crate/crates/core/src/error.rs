use std::fmt;

use thiserror::Error;

use crate::client::VerificationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is singular to working precision (pivot {pivot:e} at column {column})")]
    SingularMatrix { column: usize, pivot: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("protocol error ({kind}): {detail}")]
    Protocol {
        kind: ProtocolErrorKind,
        detail: String,
    },

    #[error("worker reported {code}: {message}")]
    Remote {
        code: RemoteErrorCode,
        message: String,
    },

    #[error(
        "result rejected by verification: max residual {:e} > tolerance {:e} over {} round(s)",
        .0.max_residual, .0.tolerance, .0.rounds
    )]
    ResultRejected(VerificationReport),

    #[error("format error ({kind}): {detail}")]
    Format {
        kind: FormatErrorKind,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn protocol(kind: ProtocolErrorKind, detail: impl Into<String>) -> Self {
        Error::Protocol {
            kind,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(kind: FormatErrorKind, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }

    pub fn protocol_kind(&self) -> Option<ProtocolErrorKind> {
        match self {
            Error::Protocol { kind, .. } => Some(*kind),
            _ => None,
        }
    }

    pub fn format_kind(&self) -> Option<FormatErrorKind> {
        match self {
            Error::Format { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}

/// Category of a framing or transport failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolErrorKind {
    BadMagic,
    UnsupportedVersion,
    UnknownOpcode,
    Truncated,
    Oversize,
    TrailingBytes,
    MalformedPayload,
    UnexpectedOpcode,
    Transport,
}

impl fmt::Display for ProtocolErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProtocolErrorKind::BadMagic => "bad-magic",
            ProtocolErrorKind::UnsupportedVersion => "unsupported-version",
            ProtocolErrorKind::UnknownOpcode => "unknown-opcode",
            ProtocolErrorKind::Truncated => "truncated",
            ProtocolErrorKind::Oversize => "oversize",
            ProtocolErrorKind::TrailingBytes => "trailing-bytes",
            ProtocolErrorKind::MalformedPayload => "malformed-payload",
            ProtocolErrorKind::UnexpectedOpcode => "unexpected-opcode",
            ProtocolErrorKind::Transport => "transport",
        };
        f.write_str(s)
    }
}

/// Error codes carried in the payload of an ERROR frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoteErrorCode {
    Malformed,
    Singular,
    NoSession,
    Dimension,
    UnexpectedOpcode,
    Internal,
    Unknown(u16),
}

impl RemoteErrorCode {
    pub fn to_u16(self) -> u16 {
        match self {
            RemoteErrorCode::Malformed => 1,
            RemoteErrorCode::Singular => 2,
            RemoteErrorCode::NoSession => 3,
            RemoteErrorCode::Dimension => 4,
            RemoteErrorCode::UnexpectedOpcode => 5,
            RemoteErrorCode::Internal => 6,
            RemoteErrorCode::Unknown(c) => c,
        }
    }

    pub fn from_u16(code: u16) -> Self {
        match code {
            1 => RemoteErrorCode::Malformed,
            2 => RemoteErrorCode::Singular,
            3 => RemoteErrorCode::NoSession,
            4 => RemoteErrorCode::Dimension,
            5 => RemoteErrorCode::UnexpectedOpcode,
            6 => RemoteErrorCode::Internal,
            c => RemoteErrorCode::Unknown(c),
        }
    }
}

impl fmt::Display for RemoteErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RemoteErrorCode::Malformed => f.write_str("malformed"),
            RemoteErrorCode::Singular => f.write_str("singular"),
            RemoteErrorCode::NoSession => f.write_str("no-session"),
            RemoteErrorCode::Dimension => f.write_str("dimension"),
            RemoteErrorCode::UnexpectedOpcode => f.write_str("unexpected-opcode"),
            RemoteErrorCode::Internal => f.write_str("internal"),
            RemoteErrorCode::Unknown(c) => write!(f, "unknown({c})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    Truncated,
    LabelRange,
    CountMismatch,
    TrailingBytes,
    InvalidValue,
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FormatErrorKind::BadMagic => "bad-magic",
            FormatErrorKind::Truncated => "truncated",
            FormatErrorKind::LabelRange => "label-range",
            FormatErrorKind::CountMismatch => "count-mismatch",
            FormatErrorKind::TrailingBytes => "trailing-bytes",
            FormatErrorKind::InvalidValue => "invalid-value",
        };
        f.write_str(s)
    }
}
