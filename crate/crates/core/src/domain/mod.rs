//! Identities, key material, key pools and classified message envelopes
//! shared by every component.

mod ids;
mod key;
mod message;
mod store;
mod time;

pub use ids::{CorrelationId, EntityId, EntityKind, KeyId, MsgId};
pub use key::{BitString, Direction, KeyBlock, KeyOrigin, KeyRole, Lineage, LinkId, PoolKey};
pub use message::*;
pub use store::{find_reuse, ConsumedSegment, KeyStore, PoolStats};
pub use time::SimTime;

/// Default size of delivered keys, in bits.
pub const DEFAULT_KEY_BITS: u32 = 256;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DomainError {
    #[error("key material is empty")]
    EmptyMaterial,
    #[error("insufficient key: requested {requested} bits, {available} available")]
    InsufficientKey { requested: usize, available: usize },
    #[error("pool capacity {capacity_bits} bits exceeded by {block_bits}-bit block")]
    CapacityExceeded {
        capacity_bits: usize,
        block_bits: usize,
    },
    #[error("key block {0} already consumed")]
    AlreadyConsumed(KeyId),
    #[error("key id {0} already present in store")]
    DuplicateKeyId(KeyId),
    #[error("invalid entity id {0:?}")]
    InvalidEntity(String),
    #[error("invalid identifier {0:?}")]
    InvalidIdentifier(String),
}

impl DomainError {
    pub fn code(&self) -> ErrorCode {
        match self {
            DomainError::EmptyMaterial => ErrorCode::EmptyMaterial,
            DomainError::InsufficientKey { .. } => ErrorCode::InsufficientKey,
            DomainError::CapacityExceeded { .. } => ErrorCode::CapacityExceeded,
            _ => ErrorCode::SchemaViolation,
        }
    }
}
