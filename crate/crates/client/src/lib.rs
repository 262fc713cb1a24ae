//! Blocking TCP carrier for the frame protocol.
//!
//! [`TcpAgent`] keeps one connection open and sends requests over it in
//! order. A failed connect or a broken connection is retried with
//! exponential backoff; after the last attempt the request fails with
//! [`TransportError::Unreachable`].

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use eduction_core::manager::GmtClient;
use eduction_core::transport::frame::{self, FrameError};
use eduction_core::transport::{Agent, Frame, MsgType, RemoteStore, Request, TransportError, TransportKind};
use eduction_core::{
    Demand, DemandSignature, DemandState, DepositOutcome, KindSet, StoreError, StoreHandle, StoreStats, Value,
};

pub type TcpGmtClient = GmtClient<TcpAgent>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub connect_timeout: Duration,
    /// Read timeout for everything except AWAIT, which waits as long as it
    /// asked for plus this much.
    pub reply_timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 5,
            base_delay: Duration::from_millis(100),
            connect_timeout: Duration::from_secs(2),
            reply_timeout: Duration::from_secs(30),
        }
    }
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

pub struct TcpAgent {
    addr: String,
    policy: RetryPolicy,
    conn: Option<Conn>,
}

impl TcpAgent {
    /// An agent for `addr` (`host:port`). Nothing is dialled until the
    /// first request.
    pub fn new(addr: impl Into<String>) -> Self {
        Self::with_policy(addr, RetryPolicy::default())
    }

    pub fn with_policy(addr: impl Into<String>, policy: RetryPolicy) -> Self {
        Self { addr: addr.into(), policy, conn: None }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn resolve(&self) -> io::Result<Vec<SocketAddr>> {
        Ok(self.addr.to_socket_addrs()?.collect())
    }

    fn dial(&self) -> io::Result<Conn> {
        let mut last = io::Error::new(io::ErrorKind::NotFound, format!("{} resolves to nothing", self.addr));
        for a in self.resolve()? {
            match TcpStream::connect_timeout(&a, self.policy.connect_timeout) {
                Ok(s) => {
                    s.set_nodelay(true)?;
                    let reader = BufReader::new(s.try_clone()?);
                    return Ok(Conn { reader, writer: BufWriter::new(s) });
                }
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    fn read_timeout(&self, msg: MsgType, payload: &[u8]) -> Duration {
        let base = self.policy.reply_timeout;
        if msg == MsgType::Await && payload.len() >= 8 {
            let ms = u64::from_be_bytes(payload[payload.len() - 8..].try_into().unwrap());
            return base + Duration::from_millis(ms);
        }
        base
    }

    fn exchange(&mut self, msg: MsgType, payload: &[u8]) -> Result<Frame, FrameError> {
        if self.conn.is_none() {
            self.conn = Some(self.dial()?);
        }
        let timeout = self.read_timeout(msg, payload);
        let conn = self.conn.as_mut().unwrap();
        conn.reader.get_ref().set_read_timeout(Some(timeout))?;
        frame::write_frame(&mut conn.writer, msg, payload)?;
        frame::read_frame(&mut conn.reader)
    }
}

impl Agent for TcpAgent {
    fn kind(&self) -> TransportKind {
        TransportKind::Tcp
    }

    fn request(&mut self, msg: MsgType, payload: &[u8]) -> Result<Frame, TransportError> {
        let mut delay = self.policy.base_delay;
        let mut last = String::new();
        for attempt in 1..=self.policy.attempts.max(1) {
            match self.exchange(msg, payload) {
                Ok(f) => return Ok(f),
                Err(
                    e @ (FrameError::BadMagic(_)
                    | FrameError::BadVersion(_)
                    | FrameError::UnknownMsgType(_)
                    | FrameError::TooLarge(_)),
                ) => {
                    self.conn = None;
                    return Err(TransportError::Protocol(e.to_string()));
                }
                Err(e) => {
                    self.conn = None;
                    last = e.to_string();
                    tracing::debug!(addr = %self.addr, attempt, error = %last, "request failed");
                    if attempt < self.policy.attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(TransportError::Unreachable(format!("{}: {last}", self.addr)))
    }
}

/// Store handle over TCP that lends each concurrent caller its own
/// connection, so a blocking AWAIT never holds up other threads.
pub struct TcpStore {
    addr: String,
    policy: RetryPolicy,
    idle: Mutex<Vec<RemoteStore<TcpAgent>>>,
}

impl TcpStore {
    pub fn new(addr: impl Into<String>) -> Self {
        Self::with_policy(addr, RetryPolicy::default())
    }

    pub fn with_policy(addr: impl Into<String>, policy: RetryPolicy) -> Self {
        Self { addr: addr.into(), policy, idle: Mutex::new(Vec::new()) }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    /// Sends one request on a pooled connection and returns the raw reply.
    pub fn raw(&self, request: &Request) -> Result<Frame, StoreError> {
        self.with(|s| s.raw(request))
    }

    fn with<T>(&self, f: impl FnOnce(&RemoteStore<TcpAgent>) -> Result<T, StoreError>) -> Result<T, StoreError> {
        let conn = self
            .idle
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .pop()
            .unwrap_or_else(|| RemoteStore::new(TcpAgent::with_policy(self.addr.clone(), self.policy)));
        let out = f(&conn);
        if !matches!(out, Err(StoreError::TransportUnreachable(_))) {
            self.idle.lock().unwrap_or_else(|e| e.into_inner()).push(conn);
        }
        out
    }
}

impl StoreHandle for TcpStore {
    fn deposit(&self, demand: &Demand) -> Result<DepositOutcome, StoreError> {
        self.with(|s| s.deposit(demand))
    }
    fn claim(&self, worker: &str, kinds: KindSet, lease_ms: u64) -> Result<Option<Demand>, StoreError> {
        self.with(|s| s.claim(worker, kinds, lease_ms))
    }
    fn fulfill(&self, sig: &DemandSignature, value: &Value, worker: &str) -> Result<(), StoreError> {
        self.with(|s| s.fulfill(sig, value, worker))
    }
    fn fetch(&self, sig: &DemandSignature) -> Result<(DemandState, Option<Value>), StoreError> {
        self.with(|s| s.fetch(sig))
    }
    fn await_result(&self, sig: &DemandSignature, timeout_ms: u64) -> Result<Value, StoreError> {
        self.with(|s| s.await_result(sig, timeout_ms))
    }
    fn put_resource(&self, id: &str, bytes: &[u8]) -> Result<(), StoreError> {
        self.with(|s| s.put_resource(id, bytes))
    }
    fn get_resource(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        self.with(|s| s.get_resource(id))
    }
    fn stats(&self) -> Result<StoreStats, StoreError> {
        self.with(|s| s.stats())
    }
}

pub fn connect_store(addr: &str) -> TcpStore {
    TcpStore::new(addr)
}

pub fn connect_gmt(addr: &str) -> TcpGmtClient {
    GmtClient::new(TcpAgent::new(addr))
}
