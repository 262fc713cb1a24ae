//! Transport agents: one request/reply protocol over interchangeable
//! carriers. [`InprocAgent`] runs the full framing path inside the
//! process; the TCP carrier lives in the client and server crates.

pub mod frame;
pub mod message;

use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

pub use frame::{Frame, FrameError, MsgType};
pub use message::{Reply, Request, Service, ServiceError, SystemHandler, MAX_AWAIT_MS};

use crate::model::{Demand, DemandSignature, DemandState, KindSet, Value};
use crate::warehouse::{DepositOutcome, StoreError, StoreHandle, StoreStats};

pub const DEFAULT_DST_PORT: u16 = 4747;
pub const DEFAULT_GMT_PORT: u16 = 4748;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Inproc,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("transport unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<TransportError> for StoreError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Unreachable(m) => StoreError::TransportUnreachable(m),
            TransportError::Protocol(m) => StoreError::ProtocolError(m),
        }
    }
}

/// A connected carrier. Exactly one reply frame per request.
pub trait Agent: Send {
    fn kind(&self) -> TransportKind;
    fn request(&mut self, msg: MsgType, payload: &[u8]) -> Result<Frame, TransportError>;
}

/// Carrier that encodes and decodes real frames but never leaves the
/// process.
pub struct InprocAgent {
    service: Arc<Service>,
}

impl InprocAgent {
    pub fn new(service: Arc<Service>) -> Self {
        Self { service }
    }
}

impl Agent for InprocAgent {
    fn kind(&self) -> TransportKind {
        TransportKind::Inproc
    }

    fn request(&mut self, msg: MsgType, payload: &[u8]) -> Result<Frame, TransportError> {
        let protocol = |e: FrameError| TransportError::Protocol(e.to_string());
        let wire = frame::encode_frame(msg, payload);
        let (req, _) = frame::decode_frame(&wire).map_err(protocol)?.expect("complete frame");
        let reply = self.service.handle(&req).encode();
        let (reply, _) = frame::decode_frame(&reply).map_err(protocol)?.expect("complete frame");
        Ok(reply)
    }
}

/// Store handle that forwards every operation through an agent.
pub struct RemoteStore<A: Agent> {
    agent: Mutex<A>,
}

impl<A: Agent> RemoteStore<A> {
    pub fn new(agent: A) -> Self {
        Self { agent: Mutex::new(agent) }
    }

    /// Sends a request and returns the raw reply frame.
    pub fn raw(&self, request: &Request) -> Result<Frame, StoreError> {
        let (msg, payload) = request.encode();
        Ok(self.agent.lock().request(msg, &payload)?)
    }

    fn call(&self, request: Request) -> Result<Reply, StoreError> {
        let reply = self.raw(&request)?;
        Reply::decode_for(&request, &reply).map_err(StoreError::from)?.into_result()
    }
}

fn unexpected(reply: Reply) -> StoreError {
    StoreError::ProtocolError(format!("unexpected reply {reply:?}"))
}

impl<A: Agent> StoreHandle for RemoteStore<A> {
    fn deposit(&self, demand: &Demand) -> Result<DepositOutcome, StoreError> {
        match self.call(Request::Deposit(demand.clone()))? {
            Reply::Deposited(o) => Ok(o),
            r => Err(unexpected(r)),
        }
    }

    fn claim(&self, worker: &str, kinds: KindSet, lease_ms: u64) -> Result<Option<Demand>, StoreError> {
        match self.call(Request::Claim { worker: worker.to_owned(), kinds, lease_ms })? {
            Reply::Claimed(d) => Ok(d),
            r => Err(unexpected(r)),
        }
    }

    fn fulfill(&self, sig: &DemandSignature, value: &Value, worker: &str) -> Result<(), StoreError> {
        match self.call(Request::Fulfill { signature: sig.clone(), value: value.clone(), worker: worker.to_owned() })? {
            Reply::Done => Ok(()),
            r => Err(unexpected(r)),
        }
    }

    fn fetch(&self, sig: &DemandSignature) -> Result<(DemandState, Option<Value>), StoreError> {
        match self.call(Request::Fetch(sig.clone()))? {
            Reply::Fetched(s, v) => Ok((s, v)),
            r => Err(unexpected(r)),
        }
    }

    fn await_result(&self, sig: &DemandSignature, timeout_ms: u64) -> Result<Value, StoreError> {
        match self.call(Request::Await { signature: sig.clone(), timeout_ms: timeout_ms.min(MAX_AWAIT_MS) })? {
            Reply::Fetched(_, Some(v)) => Ok(v),
            r => Err(unexpected(r)),
        }
    }

    fn put_resource(&self, id: &str, bytes: &[u8]) -> Result<(), StoreError> {
        match self.call(Request::ResourcePut { id: id.to_owned(), bytes: bytes.to_vec() })? {
            Reply::Done => Ok(()),
            r => Err(unexpected(r)),
        }
    }

    fn get_resource(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        match self.call(Request::ResourceGet { id: id.to_owned() })? {
            Reply::Resource(b) => Ok(b),
            r => Err(unexpected(r)),
        }
    }

    fn stats(&self) -> Result<StoreStats, StoreError> {
        match self.call(Request::Stats)? {
            Reply::Stats(s) => Ok(s),
            r => Err(unexpected(r)),
        }
    }
}

/// Store handle over an in-process agent for `store`.
pub fn inproc_store(store: Arc<dyn StoreHandle>) -> RemoteStore<InprocAgent> {
    RemoteStore::new(InprocAgent::new(Arc::new(Service::store(store))))
}
