//! Relay ciphers protecting key material on every leg, and the channel
//! policy gate.

mod cipher;
mod frame;
mod policy;
mod source;

pub use cipher::{
    ChannelCipher, GcmChannel, DEFAULT_GCM_REKEY_AFTER, GCM_KEY_BITS, OTP_MAC_KEY_BITS,
};
pub use frame::{CipherMode, WrappedKey};
pub use policy::{
    enforce_policy, is_forbidden_pair, required_properties, DenyReason, PolicyDecision, PropertySet,
};
pub use source::{KeyPurpose, KeySource, MemorySource, PoolHandle, SplitSource};

use crate::domain::{DomainError, ErrorCode};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RelayError {
    #[error("insufficient key: need {needed} bits, {available} available")]
    InsufficientKey { needed: usize, available: usize },
    #[error("GCM nonce space exhausted for this key")]
    NonceExhaustion,
    #[error("authentication failed")]
    AuthFail,
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

impl RelayError {
    pub fn code(&self) -> ErrorCode {
        match self {
            RelayError::InsufficientKey { .. } => ErrorCode::InsufficientKey,
            RelayError::NonceExhaustion => ErrorCode::NonceExhaustion,
            RelayError::AuthFail | RelayError::Malformed(_) => ErrorCode::AuthFail,
            RelayError::Domain(e) => e.code(),
        }
    }
}
