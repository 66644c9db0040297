use std::io;

/// Errors produced anywhere in the engine.
///
/// The variants split into two families that callers (the CLI in particular)
/// treat differently: input problems (I/O, parse, codec, config, weights) and
/// contract violations (shape, domain, non-finite, degenerate, contract).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("weights: {0}")]
    Weights(String),
    #[error("config: {0}")]
    Config(String),
    #[error("image codec: {0}")]
    Codec(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    /// True for errors caused by a caller breaking an operation's
    /// preconditions, as opposed to bad or unreadable input data.
    pub fn is_contract_violation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::Contract(_)
                | Error::Domain { .. }
                | Error::NonFinite(_)
                | Error::Degenerate(_)
        )
    }
}
