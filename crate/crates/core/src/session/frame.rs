//! Frame codec.
//!
//! Every frame is a fixed 20-byte big-endian header followed by the payload:
//!
//! ```text
//! offset  size  field
//!      0     2  magic 0x50 0x42 ("PB")
//!      2     1  version 0x01
//!      3     1  kind
//!      4     4  channel_id
//!      8     8  correlation_id
//!     16     4  payload_length (<= 16 MiB)
//! ```

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x50, 0x42];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 20;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    RpcReq = 0x01,
    RpcResp = 0x02,
    RpcErr = 0x03,
    Event = 0x04,
    StreamOpen = 0x05,
    StreamData = 0x06,
    StreamClose = 0x07,
    FileMeta = 0x08,
    FileChunk = 0x09,
    FileDone = 0x0A,
    Ack = 0x0B,
}

impl FrameKind {
    pub const ALL: [FrameKind; 11] = [
        FrameKind::RpcReq,
        FrameKind::RpcResp,
        FrameKind::RpcErr,
        FrameKind::Event,
        FrameKind::StreamOpen,
        FrameKind::StreamData,
        FrameKind::StreamClose,
        FrameKind::FileMeta,
        FrameKind::FileChunk,
        FrameKind::FileDone,
        FrameKind::Ack,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x01..=0x0B => Some(Self::ALL[code as usize - 1]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub channel_id: u32,
    pub correlation_id: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("unknown frame kind {0:#04x}")]
    UnknownKind(u8),
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    PayloadTooLarge(usize),
    #[error("incomplete frame: {needed} more bytes needed")]
    NeedMoreBytes { needed: usize },
}

impl Frame {
    pub fn new(kind: FrameKind, channel_id: u32, correlation_id: u64, payload: Vec<u8>) -> Self {
        Self {
            kind,
            channel_id,
            correlation_id,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut buf)?;
        Ok(buf)
    }

    /// Appends the encoding to `buf`; `buf` is untouched on error.
    pub fn encode_into(&self, buf: &mut Vec<u8>) -> Result<(), FrameError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(FrameError::PayloadTooLarge(self.payload.len()));
        }
        buf.reserve(self.encoded_len());
        buf.extend_from_slice(&MAGIC);
        buf.push(VERSION);
        buf.push(self.kind.code());
        buf.extend_from_slice(&self.channel_id.to_be_bytes());
        buf.extend_from_slice(&self.correlation_id.to_be_bytes());
        buf.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        buf.extend_from_slice(&self.payload);
        Ok(())
    }
}

/// Decodes one frame from the front of `bytes` and returns the rest.
///
/// Header fields are validated as soon as they are available, so a garbage
/// prefix is rejected without waiting for 20 bytes.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, &[u8]), FrameError> {
    for (i, &m) in MAGIC.iter().enumerate() {
        match bytes.get(i) {
            Some(&b) if b != m => return Err(FrameError::BadMagic),
            None => return Err(need(bytes.len())),
            _ => {}
        }
    }
    match bytes.get(2) {
        Some(&v) if v != VERSION => return Err(FrameError::BadVersion(v)),
        None => return Err(need(bytes.len())),
        _ => {}
    }
    let kind = match bytes.get(3) {
        Some(&k) => FrameKind::from_code(k).ok_or(FrameError::UnknownKind(k))?,
        None => return Err(need(bytes.len())),
    };
    if bytes.len() < HEADER_LEN {
        return Err(need(bytes.len()));
    }
    let channel_id = u32::from_be_bytes(bytes[4..8].try_into().unwrap());
    let correlation_id = u64::from_be_bytes(bytes[8..16].try_into().unwrap());
    let len = u32::from_be_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLarge(len));
    }
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Err(FrameError::NeedMoreBytes {
            needed: total - bytes.len(),
        });
    }
    let frame = Frame {
        kind,
        channel_id,
        correlation_id,
        payload: bytes[HEADER_LEN..total].to_vec(),
    };
    Ok((frame, &bytes[total..]))
}

fn need(have: usize) -> FrameError {
    FrameError::NeedMoreBytes {
        needed: HEADER_LEN - have,
    }
}
