//! Network side of the eduction run-time: the TCP frame server, a small
//! HTTP status gateway and the node process that hosts tiers.

pub mod frames;
pub mod http;
pub mod node;

pub use frames::FrameServer;
pub use http::{Gateway, HttpGateway};
pub use node::{Node, NodeError, NodeOptions};
