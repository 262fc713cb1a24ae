//! Demand-driven multi-tier eduction run-time.
//!
//! The tiers share one data model ([`model`]) and talk through transport
//! agents ([`transport`]) to a single demand store ([`warehouse`]).
//! Generators ([`eval`]) evaluate compiled programs ([`lang`]) by
//! eduction, workers ([`worker`]) execute procedural demands, and the
//! manager ([`manager`]) tracks nodes and tier instances. The recognition
//! pipeline ([`pipeline`]) runs its stages as demands over the same
//! machinery.

pub mod clock;
pub mod codec;
pub mod eval;
pub mod lang;
pub mod manager;
pub mod model;
pub mod pipeline;
pub mod reference;
pub mod tiers;
pub mod transport;
pub mod warehouse;
pub mod worker;

pub use model::{Context, Demand, DemandKind, DemandSignature, DemandState, KindSet, Value};
pub use warehouse::{DepositOutcome, StoreError, StoreHandle, StoreStats, Warehouse};
