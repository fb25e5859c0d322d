use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender};

use super::connection::{ChannelState, ConnInner, StreamMsg, StreamWindow, Wire, Work};
use super::frame::{Frame, FrameKind, MAX_PAYLOAD};
use super::SessionError;

/// Unacknowledged STREAM_DATA frames a sender may have outstanding.
pub const STREAM_WINDOW: u64 = 1024;
/// The receiver acknowledges after every this many consumed frames.
pub const STREAM_ACK_EVERY: u64 = 256;

/// RPC request payload: u16 big-endian method length, UTF-8 method, args.
pub fn encode_request(method: &str, args: &[u8]) -> Result<Vec<u8>, SessionError> {
    let len = u16::try_from(method.len())
        .map_err(|_| SessionError::PayloadTooLarge(method.len()))?;
    let mut out = Vec::with_capacity(2 + method.len() + args.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(method.as_bytes());
    out.extend_from_slice(args);
    Ok(out)
}

pub fn split_request(payload: &[u8]) -> Result<(&str, &[u8]), String> {
    let Some(len) = payload.get(..2) else {
        return Err("malformed request: missing method length".into());
    };
    let len = u16::from_be_bytes([len[0], len[1]]) as usize;
    let Some(name) = payload.get(2..2 + len) else {
        return Err("malformed request: truncated method name".into());
    };
    let name = std::str::from_utf8(name).map_err(|_| "malformed request: method not UTF-8")?;
    Ok((name, &payload[2 + len..]))
}

/// A logical channel on one connection.
#[derive(Clone)]
pub struct Channel {
    conn: Arc<ConnInner>,
    state: Arc<ChannelState>,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("id", &self.state.id)
            .field("open", &self.is_open())
            .finish()
    }
}

impl Channel {
    pub(crate) fn new(conn: Arc<ConnInner>, state: Arc<ChannelState>) -> Self {
        Self { conn, state }
    }

    pub fn id(&self) -> u32 {
        self.state.id
    }

    pub fn is_open(&self) -> bool {
        !self.state.closed.load(Ordering::Acquire) && !self.conn.shared.is_closed()
    }

    /// Closes this end of the channel. The connection stays up.
    pub fn close(&self) {
        self.state.closed.store(true, Ordering::Release);
    }

    fn ensure_open(&self) -> Result<(), SessionError> {
        if self.is_open() {
            Ok(())
        } else {
            Err(SessionError::ChannelClosed)
        }
    }

    fn send(&self, kind: FrameKind, corr: u64, payload: Vec<u8>) -> Result<(), SessionError> {
        self.ensure_open()?;
        self.conn
            .shared
            .send(Frame::new(kind, self.state.id, corr, payload))
    }

    /// Remote procedure call; blocks until the matching response arrives or
    /// `timeout` elapses.
    pub fn call(&self, method: &str, args: &[u8], timeout: Duration) -> Result<Vec<u8>, SessionError> {
        self.ensure_open()?;
        let payload = encode_request(method, args)?;
        if payload.len() > MAX_PAYLOAD {
            return Err(SessionError::PayloadTooLarge(payload.len()));
        }
        let corr = self.conn.shared.next_correlation();
        let (tx, rx) = bounded(1);
        self.state.pending_calls.lock().insert(corr, tx);
        // A hang-up that raced the insert would leave us waiting for nothing.
        if let Err(e) = self.ensure_open().and_then(|_| {
            self.conn
                .shared
                .send(Frame::new(FrameKind::RpcReq, self.state.id, corr, payload))
        }) {
            self.state.pending_calls.lock().remove(&corr);
            return Err(e);
        }
        match rx.recv_timeout(timeout) {
            Ok(result) => result,
            Err(RecvTimeoutError::Timeout) => {
                self.state.pending_calls.lock().remove(&corr);
                Err(SessionError::Timeout {
                    after_ms: timeout.as_millis() as u64,
                })
            }
            Err(RecvTimeoutError::Disconnected) => Err(SessionError::ChannelClosed),
        }
    }

    /// Registers the responder for `method`. Handlers on one channel run one
    /// at a time in request arrival order.
    pub fn serve<F>(&self, method: &str, handler: F) -> Result<Registration, SessionError>
    where
        F: FnMut(&[u8]) -> Result<Vec<u8>, String> + Send + 'static,
    {
        self.ensure_open()?;
        if !self.state.registry.lock().methods.insert(method.to_owned()) {
            return Err(SessionError::DuplicateMethod(method.to_owned()));
        }
        let _ = self
            .state
            .work_tx
            .send(Work::Serve(method.to_owned(), Box::new(handler)));
        Ok(Registration {
            state: self.state.clone(),
            target: Target::Method(method.to_owned()),
        })
    }

    /// Fire-and-forget event.
    pub fn publish(&self, payload: &[u8]) -> Result<(), SessionError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(SessionError::PayloadTooLarge(payload.len()));
        }
        self.send(FrameKind::Event, 0, payload.to_vec())
    }

    /// Installs the single event handler for this channel. Events that
    /// arrived earlier are delivered first, in order.
    pub fn subscribe<F>(&self, handler: F) -> Result<Registration, SessionError>
    where
        F: FnMut(&[u8]) + Send + 'static,
    {
        self.ensure_open()?;
        {
            let mut reg = self.state.registry.lock();
            if reg.subscribed {
                return Err(SessionError::AlreadySubscribed);
            }
            reg.subscribed = true;
        }
        let _ = self.state.work_tx.send(Work::Subscribe(Box::new(handler)));
        Ok(Registration {
            state: self.state.clone(),
            target: Target::Subscriber,
        })
    }

    pub fn open_stream(&self) -> Result<StreamSender, SessionError> {
        self.ensure_open()?;
        let id = self.conn.shared.next_correlation();
        let window = self.state.new_window(id);
        if let Err(e) = self.send(FrameKind::StreamOpen, id, Vec::new()) {
            self.state.streams_out.lock().remove(&id);
            return Err(e);
        }
        Ok(StreamSender {
            channel: self.clone(),
            window,
            id,
            open: true,
            max_in_flight: 0,
        })
    }

    /// Waits for the peer to open a stream on this channel.
    pub fn accept_stream(&self, timeout: Option<Duration>) -> Result<StreamReceiver, SessionError> {
        recv_with(&self.state.accept_rx, timeout, || self.is_open())
    }

    /// Sends `content` as FILE_META, chunks, FILE_DONE and waits for the
    /// receiver's checksum-verified acknowledgement.
    pub fn send_file(&self, name: &str, content: &[u8], chunk_size: usize) -> Result<FileReceipt, SessionError> {
        if chunk_size == 0 || chunk_size > MAX_PAYLOAD {
            return Err(SessionError::InvalidChunkSize(chunk_size));
        }
        self.ensure_open()?;
        let id = self.conn.shared.next_correlation();
        let (tx, rx) = bounded(1);
        self.state.pending_files.lock().insert(id, tx);
        let checksum = crc32fast::hash(content);
        let sent = (|| {
            let mut meta = (content.len() as u64).to_be_bytes().to_vec();
            meta.extend_from_slice(name.as_bytes());
            self.send(FrameKind::FileMeta, id, meta)?;
            for chunk in content.chunks(chunk_size) {
                self.send(FrameKind::FileChunk, id, chunk.to_vec())?;
            }
            self.send(FrameKind::FileDone, id, checksum.to_be_bytes().to_vec())
        })();
        if let Err(e) = sent {
            self.state.pending_files.lock().remove(&id);
            return Err(e);
        }
        let ack = rx.recv().map_err(|_| SessionError::ChannelClosed)??;
        if !ack.ok || ack.receipt.checksum != checksum {
            return Err(SessionError::ChecksumMismatch {
                expected: checksum,
                actual: ack.receipt.checksum,
            });
        }
        Ok(ack.receipt)
    }

    /// Next file received and verified on this channel.
    pub fn recv_file(&self, timeout: Option<Duration>) -> Result<ReceivedFile, SessionError> {
        recv_with(&self.state.files_rx, timeout, || self.is_open())
    }

    /// Fault injection: flip the byte at `offset` of the next file received
    /// on this end, before its checksum is verified.
    #[doc(hidden)]
    pub fn inject_file_corruption(&self, offset: usize) {
        *self.state.corrupt_next_file.lock() = Some(offset);
    }
}

fn recv_with<T>(
    rx: &Receiver<T>,
    timeout: Option<Duration>,
    open: impl Fn() -> bool,
) -> Result<T, SessionError> {
    // Poll in slices so a hang-up is noticed while waiting.
    let slice = Duration::from_millis(20);
    let deadline = timeout.map(|t| std::time::Instant::now() + t);
    loop {
        let wait = match deadline {
            Some(d) => d.saturating_duration_since(std::time::Instant::now()).min(slice),
            None => slice,
        };
        match rx.recv_timeout(wait) {
            Ok(v) => return Ok(v),
            Err(RecvTimeoutError::Disconnected) => return Err(SessionError::ChannelClosed),
            Err(RecvTimeoutError::Timeout) => {}
        }
        if !open() {
            return Err(SessionError::ChannelClosed);
        }
        if let Some(d) = deadline {
            if std::time::Instant::now() >= d {
                return Err(SessionError::Timeout {
                    after_ms: timeout.unwrap_or_default().as_millis() as u64,
                });
            }
        }
    }
}

enum Target {
    Method(String),
    Subscriber,
}

/// Handle to a served method or an event subscription.
pub struct Registration {
    state: Arc<ChannelState>,
    target: Target,
}

impl std::fmt::Debug for Registration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let target = match &self.target {
            Target::Method(m) => m.as_str(),
            Target::Subscriber => "<subscriber>",
        };
        f.debug_struct("Registration")
            .field("channel", &self.state.id)
            .field("target", &target)
            .finish()
    }
}

impl Registration {
    pub fn cancel(self) {
        let mut reg = self.state.registry.lock();
        let work = match &self.target {
            Target::Method(m) => {
                reg.methods.remove(m);
                Work::Unserve(m.clone())
            }
            Target::Subscriber => {
                reg.subscribed = false;
                Work::Unsubscribe
            }
        };
        let _ = self.state.work_tx.send(work);
    }
}

/// Sending half of a data stream. Blocks in [`StreamSender::send`] while
/// [`STREAM_WINDOW`] frames are unacknowledged.
pub struct StreamSender {
    channel: Channel,
    window: Arc<StreamWindow>,
    id: u64,
    open: bool,
    max_in_flight: u64,
}

impl StreamSender {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn send(&mut self, payload: &[u8]) -> Result<(), SessionError> {
        if !self.open {
            return Err(SessionError::StreamClosed);
        }
        if payload.len() > MAX_PAYLOAD {
            return Err(SessionError::PayloadTooLarge(payload.len()));
        }
        self.channel.ensure_open()?;
        {
            let mut w = self.window.state.lock();
            while w.sent - w.acked >= STREAM_WINDOW && !w.broken {
                self.window.cv.wait(&mut w);
            }
            if w.broken {
                return Err(SessionError::ChannelClosed);
            }
            w.sent += 1;
            self.max_in_flight = self.max_in_flight.max(w.sent - w.acked);
        }
        self.channel
            .send(FrameKind::StreamData, self.id, payload.to_vec())
    }

    /// Frames sent but not yet acknowledged.
    pub fn in_flight(&self) -> u64 {
        let w = self.window.state.lock();
        w.sent - w.acked
    }

    /// Highest in-flight count observed right after a send.
    pub fn max_in_flight(&self) -> u64 {
        self.max_in_flight
    }

    pub fn close(&mut self) -> Result<(), SessionError> {
        if !self.open {
            return Err(SessionError::StreamClosed);
        }
        self.open = false;
        self.channel.state.streams_out.lock().remove(&self.id);
        self.channel.send(FrameKind::StreamClose, self.id, Vec::new())
    }
}

impl Drop for StreamSender {
    fn drop(&mut self) {
        if self.open {
            let _ = self.close();
        }
    }
}

/// Receiving half of a data stream.
pub struct StreamReceiver {
    channel_id: u32,
    id: u64,
    rx: Receiver<StreamMsg>,
    outbound: Sender<Wire>,
    consumed: u64,
    finished: bool,
}

impl StreamReceiver {
    pub(crate) fn new(channel_id: u32, id: u64, rx: Receiver<StreamMsg>, outbound: Sender<Wire>) -> Self {
        Self {
            channel_id,
            id,
            rx,
            outbound,
            consumed: 0,
            finished: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Next item, or `None` once the sender closed the stream.
    pub fn next_item(&mut self) -> Result<Option<Vec<u8>>, SessionError> {
        self.next_timeout(None)
    }

    pub fn next_timeout(&mut self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>, SessionError> {
        if self.finished {
            return Ok(None);
        }
        let msg = match timeout {
            None => self.rx.recv().map_err(|_| SessionError::ChannelClosed)?,
            Some(t) => match self.rx.recv_timeout(t) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(SessionError::Timeout {
                        after_ms: t.as_millis() as u64,
                    })
                }
                Err(RecvTimeoutError::Disconnected) => return Err(SessionError::ChannelClosed),
            },
        };
        match msg {
            StreamMsg::Data(payload) => {
                self.consumed += 1;
                if self.consumed.is_multiple_of(STREAM_ACK_EVERY) {
                    let ack = Frame::new(
                        FrameKind::Ack,
                        self.channel_id,
                        self.id,
                        self.consumed.to_be_bytes().to_vec(),
                    );
                    let _ = self.outbound.send(Wire::Frame(ack));
                }
                Ok(Some(payload))
            }
            StreamMsg::Close => {
                self.finished = true;
                Ok(None)
            }
        }
    }
}

impl Iterator for StreamReceiver {
    type Item = Result<Vec<u8>, SessionError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_item().transpose()
    }
}

/// What the receiver acknowledged for a file transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileReceipt {
    pub name: String,
    pub size_bytes: u64,
    pub checksum: u32,
}

pub(crate) struct FileAck {
    pub ok: bool,
    pub receipt: FileReceipt,
}

impl FileReceipt {
    // ACK payload: status (0 ok, 1 mismatch), crc32, size, name.
    pub(crate) fn encode_ack(&self, ok: bool) -> Vec<u8> {
        let mut out = vec![if ok { 0 } else { 1 }];
        out.extend_from_slice(&self.checksum.to_be_bytes());
        out.extend_from_slice(&self.size_bytes.to_be_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out
    }

    pub(crate) fn decode_ack(payload: &[u8]) -> Result<FileAck, SessionError> {
        if payload.len() < 13 {
            return Err(SessionError::RemoteError("malformed file acknowledgement".into()));
        }
        Ok(FileAck {
            ok: payload[0] == 0,
            receipt: FileReceipt {
                checksum: u32::from_be_bytes(payload[1..5].try_into().unwrap()),
                size_bytes: u64::from_be_bytes(payload[5..13].try_into().unwrap()),
                name: String::from_utf8_lossy(&payload[13..]).into_owned(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedFile {
    pub receipt: FileReceipt,
    pub content: Vec<u8>,
}
