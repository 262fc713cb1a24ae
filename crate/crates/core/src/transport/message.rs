//! Request and reply payloads, and the server-side dispatcher.
//!
//! | request        | payload                                   | reply                                 |
//! |----------------|-------------------------------------------|---------------------------------------|
//! | `DEPOSIT`      | demand                                    | `OK` outcome byte, optional value     |
//! | `CLAIM`        | worker string, kind bitmask, lease u64    | `CLAIM_REPLY` 0 / 1 + demand          |
//! | `FULFILL`      | signature, value, worker string           | `OK` empty                            |
//! | `FETCH`        | signature                                 | `FETCH_REPLY` state byte, opt. value  |
//! | `AWAIT`        | signature, timeout u64                    | `FETCH_REPLY`                         |
//! | `RESOURCE_PUT` | id string, bytes                          | `OK` empty                            |
//! | `RESOURCE_GET` | id string                                 | `OK` bytes                            |
//! | `SYSTEM`       | SYSTEM-kind signature                     | `OK` value count + values             |
//! | `STATS`        | empty                                     | `OK` seven u64 counters               |
//!
//! Any request may instead be answered by `ERR` carrying an error code
//! string and a message string.

use std::sync::Arc;

use super::frame::{Frame, MsgType};
use super::TransportError;
use crate::codec::{CodecError, Reader, Writer};
use crate::model::{Demand, DemandKind, DemandSignature, DemandState, KindSet, Value};
use crate::warehouse::{DepositOutcome, StoreError, StoreHandle, StoreStats};

/// Longest wait a single AWAIT may ask for (one day).
pub const MAX_AWAIT_MS: u64 = 86_400_000;

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Deposit(Demand),
    Claim { worker: String, kinds: KindSet, lease_ms: u64 },
    Fulfill { signature: DemandSignature, value: Value, worker: String },
    Fetch(DemandSignature),
    Await { signature: DemandSignature, timeout_ms: u64 },
    ResourcePut { id: String, bytes: Vec<u8> },
    ResourceGet { id: String },
    System(DemandSignature),
    Stats,
}

impl Request {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Request::Deposit(_) => MsgType::Deposit,
            Request::Claim { .. } => MsgType::Claim,
            Request::Fulfill { .. } => MsgType::Fulfill,
            Request::Fetch(_) => MsgType::Fetch,
            Request::Await { .. } => MsgType::Await,
            Request::ResourcePut { .. } => MsgType::ResourcePut,
            Request::ResourceGet { .. } => MsgType::ResourceGet,
            Request::System(_) => MsgType::System,
            Request::Stats => MsgType::Stats,
        }
    }

    pub fn encode(&self) -> (MsgType, Vec<u8>) {
        let mut w = Writer::new();
        match self {
            Request::Deposit(d) => {
                w.demand(d);
            }
            Request::Claim { worker, kinds, lease_ms } => {
                w.str(worker).u8(kinds.bits()).u64(*lease_ms);
            }
            Request::Fulfill { signature, value, worker } => {
                w.signature(signature).value(value).str(worker);
            }
            Request::Fetch(sig) | Request::System(sig) => {
                w.signature(sig);
            }
            Request::Await { signature, timeout_ms } => {
                w.signature(signature).u64(*timeout_ms);
            }
            Request::ResourcePut { id, bytes } => {
                w.str(id).bytes(bytes);
            }
            Request::ResourceGet { id } => {
                w.str(id);
            }
            Request::Stats => {}
        }
        (self.msg_type(), w.into_bytes())
    }

    pub fn decode(msg: MsgType, payload: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(payload);
        let req = match msg {
            MsgType::Deposit => Request::Deposit(r.demand()?),
            MsgType::Claim => {
                let worker = r.str()?;
                let bits = r.u8()?;
                let kinds = KindSet::from_bits(bits)
                    .filter(|_| bits != 0)
                    .ok_or_else(|| CodecError::MalformedEncoding(format!("kind mask {bits:#04x}")))?;
                Request::Claim { worker, kinds, lease_ms: r.u64()? }
            }
            MsgType::Fulfill => {
                let signature = r.signature()?;
                let value = r.value()?;
                Request::Fulfill { signature, value, worker: r.str()? }
            }
            MsgType::Fetch => Request::Fetch(r.signature()?),
            MsgType::Await => {
                let signature = r.signature()?;
                let timeout_ms = r.u64()?;
                if timeout_ms > MAX_AWAIT_MS {
                    return Err(CodecError::MalformedEncoding(format!("await timeout {timeout_ms} ms")));
                }
                Request::Await { signature, timeout_ms }
            }
            MsgType::ResourcePut => {
                let id = r.str()?;
                Request::ResourcePut { id, bytes: r.bytes()? }
            }
            MsgType::ResourceGet => Request::ResourceGet { id: r.str()? },
            MsgType::System => {
                let sig = r.signature()?;
                if sig.kind != DemandKind::System {
                    return Err(CodecError::MalformedEncoding("SYSTEM frame without system demand".into()));
                }
                Request::System(sig)
            }
            MsgType::Stats => Request::Stats,
            other => return Err(CodecError::MalformedEncoding(format!("{other:?} is not a request"))),
        };
        r.finish()?;
        let stored = match &req {
            Request::Deposit(d) => Some(&d.signature),
            Request::Fulfill { signature, .. } | Request::Await { signature, .. } => Some(signature),
            Request::Fetch(sig) => Some(sig),
            _ => None,
        };
        // system demands only travel in SYSTEM frames; they are never stored
        if stored.is_some_and(|s| s.kind == DemandKind::System) {
            return Err(CodecError::MalformedEncoding(format!("system demand in {msg:?} frame")));
        }
        Ok(req)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Deposited(DepositOutcome),
    Claimed(Option<Demand>),
    Done,
    Fetched(DemandState, Option<Value>),
    Resource(Vec<u8>),
    Stats(StoreStats),
    System(Vec<Value>),
    Error { code: String, message: String },
}

impl Reply {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Reply::Error { code: code.to_owned(), message: message.into() }
    }

    pub fn encode(&self) -> (MsgType, Vec<u8>) {
        let mut w = Writer::new();
        let msg = match self {
            Reply::Deposited(o) => {
                match o {
                    DepositOutcome::Enqueued => w.u8(0),
                    DepositOutcome::DuplicatePending => w.u8(1),
                    DepositOutcome::AlreadyComputed(v) => w.u8(2).value(v),
                };
                MsgType::Ok
            }
            Reply::Claimed(d) => {
                match d {
                    None => w.u8(0),
                    Some(d) => w.u8(1).demand(d),
                };
                MsgType::ClaimReply
            }
            Reply::Done => MsgType::Ok,
            Reply::Fetched(state, v) => {
                w.u8(state.code()).opt_value(v.as_ref());
                MsgType::FetchReply
            }
            Reply::Resource(b) => {
                w.bytes(b);
                MsgType::Ok
            }
            Reply::Stats(s) => {
                for c in [s.deposits, s.hits, s.misses, s.computed, s.pending, s.in_process, s.redeliveries] {
                    w.u64(c);
                }
                MsgType::Ok
            }
            Reply::System(values) => {
                w.len_prefix(values.len());
                for v in values {
                    w.value(v);
                }
                MsgType::Ok
            }
            Reply::Error { code, message } => {
                w.str(code).str(message);
                MsgType::Err
            }
        };
        (msg, w.into_bytes())
    }

    /// Decodes the reply to `request`; the shape of an `OK` payload depends
    /// on what was asked.
    pub fn decode_for(request: &Request, frame: &Frame) -> Result<Self, TransportError> {
        let protocol = |e: CodecError| TransportError::Protocol(e.to_string());
        let mut r = Reader::new(&frame.payload);
        let expected = match request {
            Request::Claim { .. } => MsgType::ClaimReply,
            Request::Fetch(_) | Request::Await { .. } => MsgType::FetchReply,
            _ => MsgType::Ok,
        };
        if frame.msg_type == MsgType::Err {
            let code = r.str().map_err(protocol)?;
            let message = r.str().map_err(protocol)?;
            r.finish().map_err(protocol)?;
            return Ok(Reply::Error { code, message });
        }
        if frame.msg_type != expected {
            return Err(TransportError::Protocol(format!("expected {expected:?} reply, got {:?}", frame.msg_type)));
        }
        let reply = (|| -> Result<Reply, CodecError> {
            Ok(match request {
                Request::Deposit(_) => Reply::Deposited(match r.u8()? {
                    0 => DepositOutcome::Enqueued,
                    1 => DepositOutcome::DuplicatePending,
                    2 => DepositOutcome::AlreadyComputed(r.value()?),
                    b => return Err(CodecError::MalformedEncoding(format!("deposit outcome {b}"))),
                }),
                Request::Claim { .. } => Reply::Claimed(match r.u8()? {
                    0 => None,
                    1 => Some(r.demand()?),
                    b => return Err(CodecError::MalformedEncoding(format!("claim flag {b}"))),
                }),
                Request::Fulfill { .. } | Request::ResourcePut { .. } => Reply::Done,
                Request::Fetch(_) | Request::Await { .. } => {
                    let code = r.u8()?;
                    let state = DemandState::from_code(code)
                        .ok_or_else(|| CodecError::MalformedEncoding(format!("state {code}")))?;
                    Reply::Fetched(state, r.opt_value()?)
                }
                Request::ResourceGet { .. } => Reply::Resource(r.bytes()?),
                Request::Stats => Reply::Stats(StoreStats {
                    deposits: r.u64()?,
                    hits: r.u64()?,
                    misses: r.u64()?,
                    computed: r.u64()?,
                    pending: r.u64()?,
                    in_process: r.u64()?,
                    redeliveries: r.u64()?,
                }),
                Request::System(_) => {
                    let n = r.count(2)?;
                    let mut values = Vec::with_capacity(n);
                    for _ in 0..n {
                        values.push(r.value()?);
                    }
                    Reply::System(values)
                }
            })
        })()
        .map_err(protocol)?;
        r.finish().map_err(protocol)?;
        Ok(reply)
    }

    /// Turns an `Error` reply into the matching store error.
    pub fn into_result(self) -> Result<Reply, StoreError> {
        match self {
            Reply::Error { code, message } => Err(StoreError::from_code(&code, &message)),
            other => Ok(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceError {
    pub code: String,
    pub message: String,
}

impl ServiceError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self { code: code.to_owned(), message: message.into() }
    }
}

/// Handles SYSTEM demands (the manager tier).
pub trait SystemHandler: Send + Sync {
    fn handle_system(&self, sig: &DemandSignature) -> Result<Vec<Value>, ServiceError>;
}

/// Server-side dispatcher shared by every carrier.
#[derive(Clone, Default)]
pub struct Service {
    store: Option<Arc<dyn StoreHandle>>,
    system: Option<Arc<dyn SystemHandler>>,
}

impl Service {
    pub fn store(store: Arc<dyn StoreHandle>) -> Self {
        Self { store: Some(store), system: None }
    }

    pub fn system(system: Arc<dyn SystemHandler>) -> Self {
        Self { store: None, system: Some(system) }
    }

    pub fn with_system(mut self, system: Arc<dyn SystemHandler>) -> Self {
        self.system = Some(system);
        self
    }

    pub fn store_handle(&self) -> Option<&Arc<dyn StoreHandle>> {
        self.store.as_ref()
    }

    pub fn handle(&self, frame: &Frame) -> Frame {
        let reply = match Request::decode(frame.msg_type, &frame.payload) {
            Ok(req) => self.execute(req),
            Err(e) => Reply::error("ProtocolError", e.to_string()),
        };
        let (msg, payload) = reply.encode();
        Frame::new(msg, payload)
    }

    pub fn execute(&self, req: Request) -> Reply {
        if let Request::System(sig) = &req {
            return match &self.system {
                None => Reply::error("Unsupported", "no manager on this endpoint"),
                Some(h) => match h.handle_system(sig) {
                    Ok(values) => Reply::System(values),
                    Err(e) => Reply::Error { code: e.code, message: e.message },
                },
            };
        }
        let Some(store) = &self.store else {
            return Reply::error("Unsupported", "no demand store on this endpoint");
        };
        let result = match req {
            Request::Deposit(d) => store.deposit(&d).map(Reply::Deposited),
            Request::Claim { worker, kinds, lease_ms } => store.claim(&worker, kinds, lease_ms).map(Reply::Claimed),
            Request::Fulfill { signature, value, worker } => {
                store.fulfill(&signature, &value, &worker).map(|_| Reply::Done)
            }
            Request::Fetch(sig) => store.fetch(&sig).map(|(s, v)| Reply::Fetched(s, v)),
            Request::Await { signature, timeout_ms } => {
                store.await_result(&signature, timeout_ms).map(|v| Reply::Fetched(DemandState::Computed, Some(v)))
            }
            Request::ResourcePut { id, bytes } => store.put_resource(&id, &bytes).map(|_| Reply::Done),
            Request::ResourceGet { id } => store.get_resource(&id).map(Reply::Resource),
            Request::Stats => store.stats().map(Reply::Stats),
            Request::System(_) => unreachable!(),
        };
        result.unwrap_or_else(|e| Reply::error(e.code(), e.to_string()))
    }
}
