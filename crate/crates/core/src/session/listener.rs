use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;

use super::{Binding, Channel, Connection, SessionError};

/// Accepts in-process connections; the in-memory counterpart of a TCP
/// listener.
#[derive(Clone)]
pub struct LocalListener {
    tx: Sender<Option<Connection>>,
    rx: Receiver<Option<Connection>>,
}

impl Default for LocalListener {
    fn default() -> Self {
        Self::new()
    }
}

impl LocalListener {
    pub fn new() -> Self {
        let (tx, rx) = unbounded();
        Self { tx, rx }
    }

    /// Client side: returns one end and queues the other for `accept`.
    pub fn connect(&self) -> Result<Connection, SessionError> {
        let (client, server) = Connection::pair();
        self.tx
            .send(Some(server))
            .map_err(|_| SessionError::ConnectFailure {
                address: "in-process".into(),
                reason: "listener gone".into(),
            })?;
        Ok(client)
    }

    pub fn accept(&self, timeout: Duration) -> Option<Connection> {
        self.rx.recv_timeout(timeout).unwrap_or_default()
    }

    /// Runs `on_accept` for each new connection on a background thread.
    pub fn spawn_acceptor<F>(&self, mut on_accept: F) -> Acceptor
    where
        F: FnMut(Connection) + Send + 'static,
    {
        let rx = self.rx.clone();
        let tx = self.tx.clone();
        let handle = thread::spawn(move || {
            while let Ok(Some(conn)) = rx.recv() {
                on_accept(conn);
            }
        });
        Acceptor {
            stop: Box::new(move || {
                let _ = tx.send(None);
            }),
            handle: Some(handle),
        }
    }
}

/// TCP listener for session connections.
pub struct SessionListener {
    inner: TcpListener,
}

impl SessionListener {
    pub fn bind(address: &str) -> Result<Self, SessionError> {
        TcpListener::bind(address)
            .map(|inner| Self { inner })
            .map_err(|e| SessionError::Io(format!("bind {address}: {e}")))
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.inner.local_addr().expect("bound listener has an address")
    }

    pub fn accept(&self) -> Result<Connection, SessionError> {
        let (stream, _) = self
            .inner
            .accept()
            .map_err(|e| SessionError::Io(e.to_string()))?;
        Connection::from_tcp(stream).map_err(|e| SessionError::Io(e.to_string()))
    }

    pub fn spawn_acceptor<F>(self, mut on_accept: F) -> Acceptor
    where
        F: FnMut(Connection) + Send + 'static,
    {
        let stopping = Arc::new(AtomicBool::new(false));
        let addr = self.local_addr();
        let flag = stopping.clone();
        let handle = thread::spawn(move || {
            for stream in self.inner.incoming() {
                if flag.load(Ordering::Acquire) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                if let Ok(conn) = Connection::from_tcp(stream) {
                    on_accept(conn);
                }
            }
        });
        Acceptor {
            stop: Box::new(move || {
                stopping.store(true, Ordering::Release);
                // Wake the blocking accept.
                let _ = TcpStream::connect_timeout(&addr, Duration::from_secs(1));
            }),
            handle: Some(handle),
        }
    }
}

/// Background accept loop; stopped on [`Acceptor::stop`] or drop.
pub struct Acceptor {
    stop: Box<dyn Fn() + Send>,
    handle: Option<JoinHandle<()>>,
}

impl Acceptor {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(h) = self.handle.take() {
            (self.stop)();
            let _ = h.join();
        }
    }
}

impl Drop for Acceptor {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Opens channels according to their [`Binding`], reusing one connection
/// per destination.
pub struct Connector {
    local: Option<LocalListener>,
    connections: Mutex<HashMap<String, Connection>>,
}

impl Connector {
    /// In-process bindings connect to `local`.
    pub fn new(local: LocalListener) -> Self {
        Self {
            local: Some(local),
            connections: Mutex::new(HashMap::new()),
        }
    }

    pub fn network_only() -> Self {
        Self {
            local: None,
            connections: Mutex::new(HashMap::new()),
        }
    }

    pub fn connection(&self, binding: &Binding) -> Result<Connection, SessionError> {
        let key = binding.address().to_owned();
        let mut conns = self.connections.lock();
        if let Some(c) = conns.get(&key) {
            if !c.is_closed() {
                return Ok(c.clone());
            }
        }
        let conn = match binding {
            Binding::InProcess => self
                .local
                .as_ref()
                .ok_or_else(|| SessionError::ConnectFailure {
                    address: "in-process".into(),
                    reason: "no local listener configured".into(),
                })?
                .connect()?,
            Binding::Network { address } => Connection::connect_tcp(address)?,
        };
        conns.insert(key, conn.clone());
        Ok(conn)
    }

    pub fn open_channel(&self, binding: &Binding, channel_id: u32) -> Result<Channel, SessionError> {
        self.connection(binding)?.open_channel(channel_id)
    }

    pub fn close_all(&self) {
        for (_, c) in self.connections.lock().drain() {
            c.close();
        }
    }
}
