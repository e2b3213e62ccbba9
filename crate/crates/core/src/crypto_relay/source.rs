use crate::domain::{BitString, KeyStore, PoolKey, SimTime};

use super::RelayError;

/// What a draw of key material will be used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyPurpose {
    Pad,
    MacKey,
    CipherKey,
}

/// Something a cipher can draw one-time key material from.
pub trait KeySource {
    fn available(&self, purpose: KeyPurpose) -> usize;
    fn take(&mut self, purpose: KeyPurpose, n_bits: usize) -> Result<BitString, RelayError>;

    /// True when MAC keys are drawn from a different pool than pads.
    fn separate_mac_pool(&self) -> bool {
        false
    }
}

/// Draws every purpose from one pool of a [`KeyStore`].
pub struct PoolHandle<'a> {
    store: &'a mut KeyStore,
    pool: PoolKey,
    now: SimTime,
}

impl<'a> PoolHandle<'a> {
    pub fn new(store: &'a mut KeyStore, pool: PoolKey, now: SimTime) -> Self {
        Self { store, pool, now }
    }
}

impl KeySource for PoolHandle<'_> {
    fn available(&self, _purpose: KeyPurpose) -> usize {
        self.store.available_bits(&self.pool)
    }

    fn take(&mut self, _purpose: KeyPurpose, n_bits: usize) -> Result<BitString, RelayError> {
        let blocks = self
            .store
            .consume(&self.pool, n_bits, self.now)
            .map_err(|e| match e {
                crate::domain::DomainError::InsufficientKey {
                    requested,
                    available,
                } => RelayError::InsufficientKey {
                    needed: requested,
                    available,
                },
                other => other.into(),
            })?;
        let parts: Vec<BitString> = blocks.iter().map(|b| b.bits().clone()).collect();
        Ok(BitString::concat(&parts))
    }
}

/// Pads and cipher keys from one source, MAC keys from another. Used on the
/// AKMS to AKMS leg, where the QBN key is the pad and the authentication
/// keys come from the bootstrap pool.
pub struct SplitSource<P, M> {
    pub pad: P,
    pub mac: M,
}

impl<P: KeySource, M: KeySource> KeySource for SplitSource<P, M> {
    fn separate_mac_pool(&self) -> bool {
        true
    }

    fn available(&self, purpose: KeyPurpose) -> usize {
        match purpose {
            KeyPurpose::MacKey => self.mac.available(purpose),
            _ => self.pad.available(purpose),
        }
    }

    fn take(&mut self, purpose: KeyPurpose, n_bits: usize) -> Result<BitString, RelayError> {
        match purpose {
            KeyPurpose::MacKey => self.mac.take(purpose, n_bits),
            _ => self.pad.take(purpose, n_bits),
        }
    }
}

/// One-shot material held in memory, such as a QBN key used as a pad.
pub struct MemorySource {
    bits: BitString,
}

impl MemorySource {
    pub fn new(bits: BitString) -> Self {
        Self { bits }
    }
}

impl KeySource for MemorySource {
    fn available(&self, _purpose: KeyPurpose) -> usize {
        self.bits.len_bits()
    }

    fn take(&mut self, _purpose: KeyPurpose, n_bits: usize) -> Result<BitString, RelayError> {
        let available = self.bits.len_bits();
        if n_bits > available {
            return Err(RelayError::InsufficientKey {
                needed: n_bits,
                available,
            });
        }
        let (head, tail) = self.bits.split_at(n_bits);
        self.bits = tail;
        Ok(head)
    }
}
