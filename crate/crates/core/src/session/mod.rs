//! Dedicated session protocols.
//!
//! Four communication patterns (RPC, events, data streams, file transfer)
//! share one frame format and run unchanged over either transport: an
//! in-process queue pair or a TCP byte stream. Which one a channel uses is
//! decided by its [`Binding`], normally derived from the deployment plan.

mod channel;
mod connection;
pub mod frame;
mod listener;

pub use channel::{
    encode_request, split_request, Channel, FileReceipt, ReceivedFile, Registration,
    StreamReceiver, StreamSender, STREAM_ACK_EVERY, STREAM_WINDOW,
};
pub use connection::Connection;
pub use frame::{decode_frame, Frame, FrameError, FrameKind, HEADER_LEN, MAX_PAYLOAD};
pub use listener::{Acceptor, Connector, LocalListener, SessionListener};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    PayloadTooLarge(usize),
    #[error("invalid binding address {0:?}")]
    InvalidBinding(String),
    #[error("cannot connect to {address}: {reason}")]
    ConnectFailure { address: String, reason: String },
    #[error("channel {0} is already open on this connection")]
    DuplicateChannelId(u32),
    #[error("no response within {after_ms} ms")]
    Timeout { after_ms: u64 },
    #[error("remote error: {0}")]
    RemoteError(String),
    #[error("channel closed")]
    ChannelClosed,
    #[error("method {0:?} already has a responder")]
    DuplicateMethod(String),
    #[error("channel already has a subscriber")]
    AlreadySubscribed,
    #[error("stream closed")]
    StreamClosed,
    #[error("checksum mismatch: sent {expected:#010x}, receiver computed {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("invalid chunk size {0}")]
    InvalidChunkSize(usize),
    #[error("i/o error: {0}")]
    Io(String),
}

/// How a channel reaches its peer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Binding {
    InProcess,
    Network { address: String },
}

impl Binding {
    pub fn network(address: impl Into<String>) -> Result<Self, SessionError> {
        let address = address.into();
        parse_host_port(&address).map_err(|_| SessionError::InvalidBinding(address.clone()))?;
        Ok(Binding::Network { address })
    }

    pub fn is_in_process(&self) -> bool {
        matches!(self, Binding::InProcess)
    }

    /// Empty for in-process bindings.
    pub fn address(&self) -> &str {
        match self {
            Binding::InProcess => "",
            Binding::Network { address } => address,
        }
    }
}

/// Splits `host:port`; the port must be a decimal in 1..=65535.
pub fn parse_host_port(address: &str) -> Result<(&str, u16), String> {
    let (host, port) = address
        .rsplit_once(':')
        .ok_or_else(|| format!("{address:?}: expected host:port"))?;
    if host.is_empty() || host.chars().any(char::is_whitespace) {
        return Err(format!("{address:?}: empty or malformed host"));
    }
    if port.is_empty() || !port.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("{address:?}: port is not a decimal number"));
    }
    match port.parse::<u16>() {
        Ok(p) if p >= 1 => Ok((host, p)),
        _ => Err(format!("{address:?}: port out of range 1-65535")),
    }
}
