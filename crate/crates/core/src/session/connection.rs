//! Connections and the per-connection dispatcher.
//!
//! A connection is symmetric: both ends open channels by id and may use
//! every pattern in either direction. Outbound frames go through one
//! unbounded queue (so a channel's frames keep their send order); inbound
//! frames are routed by a dispatcher thread. Replies, ACKs and stream data
//! are routed directly by the dispatcher; events and RPC requests go to a
//! per-channel worker thread that runs user handlers one at a time.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::{Condvar, Mutex};

use super::channel::{Channel, FileAck, FileReceipt, ReceivedFile, StreamReceiver};
use super::frame::{decode_frame, Frame, FrameError, FrameKind, MAX_PAYLOAD};
use super::SessionError;

pub(crate) enum Wire {
    Frame(Frame),
    Hangup,
}

pub(crate) type RpcHandler = Box<dyn FnMut(&[u8]) -> Result<Vec<u8>, String> + Send>;
pub(crate) type EventHandler = Box<dyn FnMut(&[u8]) + Send>;

pub(crate) enum Work {
    Frame(Frame),
    Serve(String, RpcHandler),
    Unserve(String),
    Subscribe(EventHandler),
    Unsubscribe,
}

pub(crate) enum StreamMsg {
    Data(Vec<u8>),
    Close,
}

#[derive(Default)]
pub(crate) struct Registry {
    pub methods: std::collections::HashSet<String>,
    pub subscribed: bool,
}

pub(crate) struct WindowState {
    pub sent: u64,
    pub acked: u64,
    pub broken: bool,
}

pub(crate) struct StreamWindow {
    pub state: Mutex<WindowState>,
    pub cv: Condvar,
}

impl StreamWindow {
    fn new() -> Self {
        Self {
            state: Mutex::new(WindowState {
                sent: 0,
                acked: 0,
                broken: false,
            }),
            cv: Condvar::new(),
        }
    }

    fn ack(&self, consumed: u64) {
        let mut s = self.state.lock();
        s.acked = s.acked.max(consumed);
        self.cv.notify_all();
    }

    fn break_off(&self) {
        self.state.lock().broken = true;
        self.cv.notify_all();
    }
}

struct FileAssembly {
    name: String,
    size: u64,
    content: Vec<u8>,
}

type CallReply = Sender<Result<Vec<u8>, SessionError>>;

pub(crate) struct ChannelState {
    pub id: u32,
    pub opened: AtomicBool,
    pub closed: AtomicBool,
    pub work_tx: Sender<Work>,
    pub registry: Mutex<Registry>,
    pub pending_calls: Mutex<HashMap<u64, CallReply>>,
    pub accept_tx: Sender<StreamReceiver>,
    pub accept_rx: Receiver<StreamReceiver>,
    streams_in: Mutex<HashMap<u64, Sender<StreamMsg>>>,
    pub streams_out: Mutex<HashMap<u64, Arc<StreamWindow>>>,
    files_in: Mutex<HashMap<u64, FileAssembly>>,
    pub files_tx: Sender<ReceivedFile>,
    pub files_rx: Receiver<ReceivedFile>,
    pub pending_files: Mutex<HashMap<u64, Sender<Result<FileAck, SessionError>>>>,
    pub corrupt_next_file: Mutex<Option<usize>>,
}

impl ChannelState {
    fn new(id: u32, outbound: Sender<Wire>) -> Arc<Self> {
        let (work_tx, work_rx) = unbounded();
        let (accept_tx, accept_rx) = unbounded();
        let (files_tx, files_rx) = unbounded();
        thread::Builder::new()
            .name(format!("plantbus-ch{id}"))
            .spawn(move || run_worker(id, outbound, work_rx))
            .expect("spawn channel worker");
        Arc::new(Self {
            id,
            opened: AtomicBool::new(false),
            closed: AtomicBool::new(false),
            work_tx,
            registry: Mutex::new(Registry::default()),
            pending_calls: Mutex::new(HashMap::new()),
            accept_tx,
            accept_rx,
            streams_in: Mutex::new(HashMap::new()),
            streams_out: Mutex::new(HashMap::new()),
            files_in: Mutex::new(HashMap::new()),
            files_tx,
            files_rx,
            pending_files: Mutex::new(HashMap::new()),
            corrupt_next_file: Mutex::new(None),
        })
    }

    pub fn new_window(&self, stream_id: u64) -> Arc<StreamWindow> {
        let w = Arc::new(StreamWindow::new());
        self.streams_out.lock().insert(stream_id, w.clone());
        w
    }

    fn hang_up(&self) {
        for (_, tx) in self.pending_calls.lock().drain() {
            let _ = tx.send(Err(SessionError::ChannelClosed));
        }
        for (_, tx) in self.pending_files.lock().drain() {
            let _ = tx.send(Err(SessionError::ChannelClosed));
        }
        for (_, w) in self.streams_out.lock().drain() {
            w.break_off();
        }
        self.streams_in.lock().clear();
        self.files_in.lock().clear();
    }
}

pub(crate) struct ConnShared {
    outbound: Sender<Wire>,
    self_tx: Sender<Wire>,
    channels: Mutex<HashMap<u32, Arc<ChannelState>>>,
    closed: AtomicBool,
    next_corr: AtomicU64,
    peer: String,
}

impl ConnShared {
    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    pub fn next_correlation(&self) -> u64 {
        self.next_corr.fetch_add(1, Ordering::Relaxed)
    }

    pub fn outbound(&self) -> Sender<Wire> {
        self.outbound.clone()
    }

    pub fn send(&self, frame: Frame) -> Result<(), SessionError> {
        if frame.payload.len() > MAX_PAYLOAD {
            return Err(SessionError::PayloadTooLarge(frame.payload.len()));
        }
        if self.is_closed() {
            return Err(SessionError::ChannelClosed);
        }
        self.outbound
            .send(Wire::Frame(frame))
            .map_err(|_| SessionError::ChannelClosed)
    }

    fn state(&self, id: u32) -> Arc<ChannelState> {
        self.channels
            .lock()
            .entry(id)
            .or_insert_with(|| ChannelState::new(id, self.outbound.clone()))
            .clone()
    }

    fn close(&self) {
        if !self.closed.swap(true, Ordering::AcqRel) {
            let _ = self.outbound.send(Wire::Hangup);
            let _ = self.self_tx.send(Wire::Hangup);
        }
    }
}

/// Closes the connection when the last user-facing handle goes away.
pub(crate) struct ConnInner {
    pub shared: Arc<ConnShared>,
}

impl Drop for ConnInner {
    fn drop(&mut self) {
        self.shared.close();
    }
}

/// One end of a session connection, over either transport.
#[derive(Clone)]
pub struct Connection {
    inner: Arc<ConnInner>,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("peer", &self.inner.shared.peer)
            .field("closed", &self.is_closed())
            .finish()
    }
}

impl Connection {
    fn start(outbound: Sender<Wire>, self_tx: Sender<Wire>, inbound: Receiver<Wire>, peer: String) -> Self {
        let shared = Arc::new(ConnShared {
            outbound,
            self_tx,
            channels: Mutex::new(HashMap::new()),
            closed: AtomicBool::new(false),
            next_corr: AtomicU64::new(1),
            peer,
        });
        let dispatcher = shared.clone();
        thread::Builder::new()
            .name("plantbus-dispatch".into())
            .spawn(move || dispatch(dispatcher, inbound))
            .expect("spawn dispatcher");
        Self {
            inner: Arc::new(ConnInner { shared }),
        }
    }

    /// Two connected in-process ends.
    pub fn pair() -> (Connection, Connection) {
        // Each end's outbound queue is the other end's inbound queue.
        let (a_tx, a_rx) = unbounded();
        let (b_tx, b_rx) = unbounded();
        let a = Connection::start(b_tx.clone(), a_tx.clone(), a_rx, "in-process".into());
        let b = Connection::start(a_tx, b_tx, b_rx, "in-process".into());
        (a, b)
    }

    /// Connects to a session listener at `address` (`host:port`).
    pub fn connect_tcp(address: &str) -> Result<Connection, SessionError> {
        let fail = |reason: String| SessionError::ConnectFailure {
            address: address.to_owned(),
            reason,
        };
        let addrs: Vec<_> = address
            .to_socket_addrs()
            .map_err(|e| fail(e.to_string()))?
            .collect();
        let mut last = String::from("no addresses resolved");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, Duration::from_secs(5)) {
                Ok(stream) => return Connection::from_tcp(stream).map_err(|e| fail(e.to_string())),
                Err(e) => last = e.to_string(),
            }
        }
        Err(fail(last))
    }

    pub fn from_tcp(stream: TcpStream) -> std::io::Result<Connection> {
        stream.set_nodelay(true)?;
        let peer = stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| "tcp".into());
        let reader = stream.try_clone()?;
        let (out_tx, out_rx) = unbounded::<Wire>();
        let (in_tx, in_rx) = unbounded::<Wire>();
        let conn = Connection::start(out_tx, in_tx.clone(), in_rx, peer);
        let inbound = in_tx;
        thread::Builder::new()
            .name("plantbus-tcp-w".into())
            .spawn(move || tcp_writer(stream, out_rx))?;
        thread::Builder::new()
            .name("plantbus-tcp-r".into())
            .spawn(move || tcp_reader(reader, inbound))?;
        Ok(conn)
    }

    /// Opens channel `id` on this end of the connection.
    pub fn open_channel(&self, id: u32) -> Result<Channel, SessionError> {
        let shared = &self.inner.shared;
        if shared.is_closed() {
            return Err(SessionError::ChannelClosed);
        }
        let state = shared.state(id);
        if state.opened.swap(true, Ordering::AcqRel) {
            return Err(SessionError::DuplicateChannelId(id));
        }
        Ok(Channel::new(self.inner.clone(), state))
    }

    pub fn is_closed(&self) -> bool {
        self.inner.shared.is_closed()
    }

    pub fn peer(&self) -> &str {
        &self.inner.shared.peer
    }

    pub fn close(&self) {
        self.inner.shared.close();
    }
}

fn tcp_writer(mut stream: TcpStream, rx: Receiver<Wire>) {
    let mut buf = Vec::with_capacity(64 * 1024);
    'outer: while let Ok(first) = rx.recv() {
        let mut next = Some(first);
        while let Some(w) = next.take() {
            match w {
                Wire::Frame(f) => {
                    // Payload size was checked on send.
                    let _ = f.encode_into(&mut buf);
                }
                Wire::Hangup => {
                    let _ = stream.write_all(&buf);
                    let _ = stream.flush();
                    break 'outer;
                }
            }
            if buf.len() < 256 * 1024 {
                next = rx.try_recv().ok();
            }
        }
        if stream.write_all(&buf).is_err() {
            break;
        }
        buf.clear();
    }
    let _ = stream.shutdown(Shutdown::Both);
}

fn tcp_reader(mut stream: TcpStream, inbound: Sender<Wire>) {
    let mut buf: Vec<u8> = Vec::with_capacity(64 * 1024);
    let mut chunk = vec![0u8; 64 * 1024];
    loop {
        let mut consumed = 0;
        loop {
            match decode_frame(&buf[consumed..]) {
                Ok((frame, rest)) => {
                    consumed = buf.len() - rest.len();
                    if inbound.send(Wire::Frame(frame)).is_err() {
                        return;
                    }
                }
                Err(FrameError::NeedMoreBytes { .. }) => break,
                Err(_) => {
                    // Protocol violation: drop the connection.
                    let _ = stream.shutdown(Shutdown::Both);
                    let _ = inbound.send(Wire::Hangup);
                    return;
                }
            }
        }
        buf.drain(..consumed);
        match stream.read(&mut chunk) {
            Ok(0) | Err(_) => {
                let _ = inbound.send(Wire::Hangup);
                return;
            }
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
        }
    }
}

fn dispatch(shared: Arc<ConnShared>, inbound: Receiver<Wire>) {
    for wire in inbound.iter() {
        let frame = match wire {
            Wire::Frame(f) => f,
            Wire::Hangup => break,
        };
        let state = shared.state(frame.channel_id);
        route(&shared, &state, frame);
    }
    shared.closed.store(true, Ordering::Release);
    let _ = shared.outbound.send(Wire::Hangup);
    let states: Vec<_> = shared.channels.lock().drain().map(|(_, s)| s).collect();
    for s in states {
        s.hang_up();
    }
}

fn route(shared: &ConnShared, state: &ChannelState, frame: Frame) {
    let corr = frame.correlation_id;
    match frame.kind {
        FrameKind::RpcReq | FrameKind::Event => {
            let _ = state.work_tx.send(Work::Frame(frame));
        }
        FrameKind::RpcResp | FrameKind::RpcErr => {
            if let Some(tx) = state.pending_calls.lock().remove(&corr) {
                let result = if frame.kind == FrameKind::RpcResp {
                    Ok(frame.payload)
                } else {
                    Err(SessionError::RemoteError(
                        String::from_utf8_lossy(&frame.payload).into_owned(),
                    ))
                };
                let _ = tx.send(result);
            }
        }
        FrameKind::StreamOpen => {
            let (tx, rx) = unbounded();
            state.streams_in.lock().insert(corr, tx);
            let receiver = StreamReceiver::new(state.id, corr, rx, shared.outbound());
            let _ = state.accept_tx.send(receiver);
        }
        FrameKind::StreamData => {
            if let Some(tx) = state.streams_in.lock().get(&corr) {
                let _ = tx.send(StreamMsg::Data(frame.payload));
            }
        }
        FrameKind::StreamClose => {
            if let Some(tx) = state.streams_in.lock().remove(&corr) {
                let _ = tx.send(StreamMsg::Close);
            }
        }
        FrameKind::FileMeta => {
            if frame.payload.len() >= 8 {
                let size = u64::from_be_bytes(frame.payload[..8].try_into().unwrap());
                let name = String::from_utf8_lossy(&frame.payload[8..]).into_owned();
                state.files_in.lock().insert(
                    corr,
                    FileAssembly {
                        name,
                        size,
                        content: Vec::with_capacity(size.min(MAX_PAYLOAD as u64) as usize),
                    },
                );
            }
        }
        FrameKind::FileChunk => {
            if let Some(asm) = state.files_in.lock().get_mut(&corr) {
                asm.content.extend_from_slice(&frame.payload);
            }
        }
        FrameKind::FileDone => {
            let Some(mut asm) = state.files_in.lock().remove(&corr) else {
                return;
            };
            if let Some(at) = state.corrupt_next_file.lock().take() {
                if let Some(b) = asm.content.get_mut(at) {
                    *b ^= 0xFF;
                }
            }
            let declared = frame
                .payload
                .get(..4)
                .map(|b| u32::from_be_bytes(b.try_into().unwrap()));
            let actual = crc32fast::hash(&asm.content);
            let received = asm.content.len() as u64;
            let ok = declared == Some(actual) && received == asm.size;
            let receipt = FileReceipt {
                name: asm.name,
                size_bytes: received,
                checksum: actual,
            };
            let ack = receipt.encode_ack(ok);
            if ok {
                let _ = state.files_tx.send(ReceivedFile {
                    receipt,
                    content: asm.content,
                });
            }
            let _ = shared.send(Frame::new(FrameKind::Ack, state.id, corr, ack));
        }
        FrameKind::Ack => {
            if let Some(w) = state.streams_out.lock().get(&corr) {
                if let Some(b) = frame.payload.get(..8) {
                    w.ack(u64::from_be_bytes(b.try_into().unwrap()));
                }
                return;
            }
            if let Some(tx) = state.pending_files.lock().remove(&corr) {
                let _ = tx.send(FileReceipt::decode_ack(&frame.payload));
            }
        }
    }
}

fn run_worker(channel_id: u32, outbound: Sender<Wire>, rx: Receiver<Work>) {
    let mut methods: HashMap<String, RpcHandler> = HashMap::new();
    let mut subscriber: Option<EventHandler> = None;
    // Frames that arrived before anyone was registered to handle them.
    let mut pending_events: VecDeque<Vec<u8>> = VecDeque::new();
    let mut pending_requests: VecDeque<Frame> = VecDeque::new();

    let reply = |frame: Frame| {
        let _ = outbound.send(Wire::Frame(frame));
    };
    let handle_request = |methods: &mut HashMap<String, RpcHandler>, frame: Frame| -> Option<Frame> {
        let corr = frame.correlation_id;
        let (method, args) = match super::channel::split_request(&frame.payload) {
            Ok(parts) => parts,
            Err(msg) => {
                reply(Frame::new(FrameKind::RpcErr, channel_id, corr, msg.into_bytes()));
                return None;
            }
        };
        let Some(handler) = methods.get_mut(method) else {
            return Some(frame);
        };
        let outcome = catch_unwind(AssertUnwindSafe(|| handler(args)))
            .unwrap_or_else(|_| Err(format!("handler for {method:?} panicked")));
        let response = match outcome {
            Ok(body) if body.len() <= MAX_PAYLOAD => {
                Frame::new(FrameKind::RpcResp, channel_id, corr, body)
            }
            Ok(body) => Frame::new(
                FrameKind::RpcErr,
                channel_id,
                corr,
                format!("response of {} bytes exceeds the payload limit", body.len()).into_bytes(),
            ),
            Err(msg) => Frame::new(FrameKind::RpcErr, channel_id, corr, msg.into_bytes()),
        };
        reply(response);
        None
    };

    for work in rx.iter() {
        match work {
            Work::Frame(frame) if frame.kind == FrameKind::Event => match subscriber.as_mut() {
                Some(h) => {
                    let payload = frame.payload;
                    let _ = catch_unwind(AssertUnwindSafe(|| h(&payload)));
                }
                None => pending_events.push_back(frame.payload),
            },
            Work::Frame(frame) => {
                if let Some(unhandled) = handle_request(&mut methods, frame) {
                    pending_requests.push_back(unhandled);
                }
            }
            Work::Serve(method, handler) => {
                methods.insert(method, handler);
                let backlog = std::mem::take(&mut pending_requests);
                for frame in backlog {
                    if let Some(unhandled) = handle_request(&mut methods, frame) {
                        pending_requests.push_back(unhandled);
                    }
                }
            }
            Work::Unserve(method) => {
                methods.remove(&method);
            }
            Work::Subscribe(mut h) => {
                for payload in pending_events.drain(..) {
                    let _ = catch_unwind(AssertUnwindSafe(|| h(&payload)));
                }
                subscriber = Some(h);
            }
            Work::Unsubscribe => subscriber = None,
        }
    }
}
