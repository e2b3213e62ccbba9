//! Message fabric: policy-checked channels between components, a trace of
//! every send, and two interchangeable backends.
//!
//! [`sim`] is a single-threaded deterministic event loop; [`socket`] runs
//! every component as tokio tasks exchanging length-prefixed frames over
//! TCP. Protocol modules never see which one is driving them.

mod channel;
pub mod sim;
pub mod socket;
mod trace;

pub use channel::{ChannelKind, ChannelRegistry, ChannelSpec, LatencyModel};
pub use trace::{MsgRecord, NotifyRecord, ObserveRecord, TraceRecord, TraceSink};

use serde::{Deserialize, Serialize};

/// Which fabric drives the components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Sim,
    Socket,
}
