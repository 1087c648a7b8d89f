//! Byte-stream transport between bus roles.
//!
//! Two interchangeable transports sit behind [`Endpoint`]: plain TCP
//! (`host:port`) for real deployments, and an in-process pipe registry
//! (`mem:name`) so unit and integration tests can run whole clusters
//! deterministically inside one process without touching the network.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, LazyLock};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;

/// Where a broker listens or a client connects.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Endpoint {
    /// TCP address in `host:port` form.
    Tcp(String),
    /// Named in-process pipe, written as `mem:name`.
    Mem(String),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Endpoint, io::Error> {
        if s.is_empty() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "empty endpoint"));
        }
        if let Some(name) = s.strip_prefix("mem:") {
            if name.is_empty() {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    "mem endpoint needs a name",
                ));
            }
            Ok(Endpoint::Mem(name.to_string()))
        } else {
            Ok(Endpoint::Tcp(s.to_string()))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "{a}"),
            Endpoint::Mem(n) => write!(f, "mem:{n}"),
        }
    }
}

/// A connected byte stream, cloneable so reader and writer can run on
/// separate threads. `shutdown` unblocks a peer blocked in `read`.
pub enum Stream {
    Tcp(TcpStream),
    Mem(MemStream),
}

impl Stream {
    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> io::Result<Stream> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let mut last = io::Error::new(io::ErrorKind::AddrNotAvailable, "no address");
                for sa in addr.to_socket_addrs()? {
                    match TcpStream::connect_timeout(&sa, timeout) {
                        Ok(s) => {
                            s.set_nodelay(true)?;
                            return Ok(Stream::Tcp(s));
                        }
                        Err(e) => last = e,
                    }
                }
                Err(last)
            }
            Endpoint::Mem(name) => mem_connect(name),
        }
    }

    pub fn try_clone(&self) -> io::Result<Stream> {
        match self {
            Stream::Tcp(s) => Ok(Stream::Tcp(s.try_clone()?)),
            Stream::Mem(s) => Ok(Stream::Mem(s.clone())),
        }
    }

    pub fn shutdown(&self) {
        match self {
            Stream::Tcp(s) => {
                let _ = s.shutdown(Shutdown::Both);
            }
            Stream::Mem(s) => s.shutdown(),
        }
    }

    /// Remote identity for log lines.
    pub fn peer(&self) -> String {
        match self {
            Stream::Tcp(s) => s
                .peer_addr()
                .map(|a| a.to_string())
                .unwrap_or_else(|_| "?".into()),
            Stream::Mem(s) => format!("mem#{}", s.id),
        }
    }
}

impl Read for Stream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.read(buf),
            Stream::Mem(s) => s.read(buf),
        }
    }
}

impl Write for Stream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.write(buf),
            Stream::Mem(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Stream::Tcp(s) => s.flush(),
            Stream::Mem(_) => Ok(()),
        }
    }
}

/// Accepting side of an endpoint.
pub enum Listener {
    Tcp(TcpListener),
    Mem(MemListener),
}

impl Listener {
    pub fn bind(endpoint: &Endpoint) -> io::Result<Listener> {
        match endpoint {
            Endpoint::Tcp(addr) => Ok(Listener::Tcp(TcpListener::bind(addr)?)),
            Endpoint::Mem(name) => mem_bind(name),
        }
    }

    pub fn accept(&self) -> io::Result<Stream> {
        match self {
            Listener::Tcp(l) => {
                let (s, _) = l.accept()?;
                s.set_nodelay(true)?;
                Ok(Stream::Tcp(s))
            }
            Listener::Mem(l) => l.accept(),
        }
    }

    /// The endpoint actually bound (resolves `:0` TCP ports).
    pub fn local_endpoint(&self) -> io::Result<Endpoint> {
        match self {
            Listener::Tcp(l) => Ok(Endpoint::Tcp(l.local_addr()?.to_string())),
            Listener::Mem(l) => Ok(Endpoint::Mem(l.name.clone())),
        }
    }

    /// Unblocks the accept loop by connecting to ourselves.
    pub fn interrupt(&self) {
        if let Ok(ep) = self.local_endpoint() {
            let _ = Stream::connect(&ep, Duration::from_millis(200));
        }
    }
}

// ---------------------------------------------------------------------------
// In-process transport
// ---------------------------------------------------------------------------

/// Bidirectional in-process stream. Cloning shares the underlying pipe the
/// way `TcpStream::try_clone` does. An empty chunk is the close marker;
/// `closed` makes EOF sticky across clones and unblocks our own reader.
#[derive(Clone)]
pub struct MemStream {
    id: u64,
    out: Sender<Vec<u8>>,
    inp: Receiver<Vec<u8>>,
    self_tx: Sender<Vec<u8>>,
    pending: Arc<Mutex<Vec<u8>>>,
    closed: Arc<std::sync::atomic::AtomicBool>,
}

impl MemStream {
    fn pair(id: u64) -> (MemStream, MemStream) {
        let a = unbounded();
        let b = unbounded();
        let left = MemStream {
            id,
            out: a.0.clone(),
            inp: b.1,
            self_tx: b.0.clone(),
            pending: Arc::new(Mutex::new(Vec::new())),
            closed: Arc::new(std::sync::atomic::AtomicBool::new(false)),
        };
        let right = MemStream {
            id,
            out: b.0,
            inp: a.1,
            self_tx: a.0,
            pending: Arc::new(Mutex::new(Vec::new())),
            closed: Arc::new(std::sync::atomic::AtomicBool::new(false)),
        };
        (left, right)
    }

    fn shutdown(&self) {
        self.closed.store(true, Ordering::SeqCst);
        let _ = self.out.send(Vec::new()); // wake the peer
        let _ = self.self_tx.send(Vec::new()); // wake our own blocked reader
    }

    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        loop {
            if self.closed.load(Ordering::SeqCst) {
                return Ok(0);
            }
            let mut pending = self.pending.lock();
            if !pending.is_empty() {
                let n = pending.len().min(buf.len());
                buf[..n].copy_from_slice(&pending[..n]);
                pending.drain(..n);
                return Ok(n);
            }
            drop(pending);
            match self.inp.recv() {
                Ok(chunk) if chunk.is_empty() => {
                    self.closed.store(true, Ordering::SeqCst);
                    return Ok(0);
                }
                Ok(chunk) => {
                    let mut pending = self.pending.lock();
                    if pending.is_empty() {
                        *pending = chunk;
                    } else {
                        pending.extend_from_slice(&chunk);
                    }
                }
                Err(_) => return Ok(0), // all peer handles dropped
            }
        }
    }

    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        if self.closed.load(Ordering::SeqCst) {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "mem stream closed"));
        }
        self.out
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "mem peer gone"))?;
        Ok(buf.len())
    }
}

pub struct MemListener {
    name: String,
    incoming: Receiver<MemStream>,
}

impl MemListener {
    fn accept(&self) -> io::Result<Stream> {
        self.incoming
            .recv()
            .map(Stream::Mem)
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "mem listener closed"))
    }
}

impl Drop for MemListener {
    fn drop(&mut self) {
        REGISTRY.lock().remove(&self.name);
    }
}

static REGISTRY: LazyLock<Mutex<HashMap<String, Sender<MemStream>>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));
static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn mem_bind(name: &str) -> io::Result<Listener> {
    let mut reg = REGISTRY.lock();
    if reg.contains_key(name) {
        return Err(io::Error::new(
            io::ErrorKind::AddrInUse,
            format!("mem:{name} already bound"),
        ));
    }
    let (tx, rx) = unbounded();
    reg.insert(name.to_string(), tx);
    Ok(Listener::Mem(MemListener {
        name: name.to_string(),
        incoming: rx,
    }))
}

fn mem_connect(name: &str) -> io::Result<Stream> {
    let reg = REGISTRY.lock();
    let sink = reg.get(name).ok_or_else(|| {
        io::Error::new(io::ErrorKind::ConnectionRefused, format!("mem:{name} not bound"))
    })?;
    let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
    let (ours, theirs) = MemStream::pair(id);
    sink.send(theirs)
        .map_err(|_| io::Error::new(io::ErrorKind::ConnectionRefused, "mem listener closed"))?;
    Ok(Stream::Mem(ours))
}
