use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{DomainError, EntityId, KeyId, SimTime};

/// Identifier of a QKD link, e.g. `"7-8"`.
pub type LinkId = String;

/// Where a block of key material came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KeyOrigin {
    QkdLink(LinkId),
    LocalRng,
    /// Expanded from a configuration-provisioned bootstrap secret.
    PreShared,
}

/// What a block is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KeyRole {
    /// Key-management-layer key protecting a relay leg.
    Kma,
    /// Relay-transported key securing the AKMS to AKMS channel.
    Qbn,
    /// End-to-end key delivered to the SAEs.
    Ksa,
}

/// Immutable run of bits backed by a shared buffer, MSB first.
///
/// Slicing never copies; the material is only materialized by
/// [`BitString::to_octets`].
#[derive(Clone)]
pub struct BitString {
    buf: Arc<[u8]>,
    start: usize,
    len: usize,
}

impl BitString {
    pub fn from_octets(octets: Vec<u8>) -> Self {
        let len = octets.len() * 8;
        Self {
            buf: octets.into(),
            start: 0,
            len,
        }
    }

    /// The first `len_bits` bits of `octets`.
    pub fn from_octets_with_len(octets: Vec<u8>, len_bits: usize) -> Self {
        assert!(len_bits <= octets.len() * 8, "bit length exceeds buffer");
        Self {
            buf: octets.into(),
            start: 0,
            len: len_bits,
        }
    }

    pub fn len_bits(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Splits after `at` bits.
    pub fn split_at(&self, at: usize) -> (BitString, BitString) {
        assert!(at <= self.len);
        let head = BitString {
            buf: self.buf.clone(),
            start: self.start,
            len: at,
        };
        let tail = BitString {
            buf: self.buf.clone(),
            start: self.start + at,
            len: self.len - at,
        };
        (head, tail)
    }

    /// Material packed MSB-first; trailing pad bits of the last octet are zero.
    pub fn to_octets(&self) -> Vec<u8> {
        extract_bits(&self.buf, self.start, self.len)
    }

    /// Concatenation of several bit strings, packed MSB-first.
    pub fn concat(parts: &[BitString]) -> BitString {
        let total: usize = parts.iter().map(|p| p.len).sum();
        let mut out = vec![0u8; total.div_ceil(8)];
        let mut pos = 0;
        for p in parts {
            if pos % 8 == 0 {
                let bytes = p.to_octets();
                out[pos / 8..pos / 8 + bytes.len()].copy_from_slice(&bytes);
            } else {
                for i in 0..p.len {
                    if bit_at(&p.buf, p.start + i) {
                        let at = pos + i;
                        out[at / 8] |= 0x80 >> (at % 8);
                    }
                }
            }
            pos += p.len;
        }
        BitString::from_octets_with_len(out, total)
    }
}

impl PartialEq for BitString {
    fn eq(&self, other: &Self) -> bool {
        self.len == other.len && self.to_octets() == other.to_octets()
    }
}

impl Eq for BitString {}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitString({} bits, redacted)", self.len)
    }
}

fn bit_at(buf: &[u8], i: usize) -> bool {
    buf[i / 8] & (0x80 >> (i % 8)) != 0
}

/// Copies bits `[start, start+len)` of `src` into a fresh MSB-first buffer.
pub(crate) fn extract_bits(src: &[u8], start: usize, len: usize) -> Vec<u8> {
    let n_bytes = len.div_ceil(8);
    let mut out = vec![0u8; n_bytes];
    if len == 0 {
        return out;
    }
    let shift = start % 8;
    let first = start / 8;
    if shift == 0 {
        out.copy_from_slice(&src[first..first + n_bytes]);
    } else {
        for (i, o) in out.iter_mut().enumerate() {
            let hi = src[first + i] << shift;
            let lo = src.get(first + i + 1).map_or(0, |b| b >> (8 - shift));
            *o = hi | lo;
        }
    }
    let tail = len % 8;
    if tail != 0 {
        out[n_bytes - 1] &= 0xffu8 << (8 - tail);
    }
    out
}

/// Position of a block inside the material it was cut from, used by the
/// one-time-use audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Lineage {
    pub root: KeyId,
    pub offset: usize,
    /// Number of splits the lineage has undergone so far.
    pub splits: u32,
}

/// Contiguous run of secret bits; the unit of all key material.
#[derive(Clone, Debug)]
pub struct KeyBlock {
    key_id: KeyId,
    bits: BitString,
    origin: KeyOrigin,
    role: KeyRole,
    created_at: SimTime,
    consumed: bool,
    lineage: Lineage,
}

impl KeyBlock {
    /// Block with a fresh random identifier drawn from `rng`.
    pub fn new<R: RngCore + ?Sized>(
        rng: &mut R,
        bits: Vec<u8>,
        origin: KeyOrigin,
        role: KeyRole,
        created_at: SimTime,
    ) -> Result<Self, DomainError> {
        Self::with_id(
            KeyId::random(rng),
            BitString::from_octets(bits),
            origin,
            role,
            created_at,
        )
    }

    /// Block with a caller-chosen identifier, e.g. the mirror copy of a key
    /// whose id was carried on the wire.
    pub fn with_id(
        key_id: KeyId,
        bits: BitString,
        origin: KeyOrigin,
        role: KeyRole,
        created_at: SimTime,
    ) -> Result<Self, DomainError> {
        if bits.is_empty() {
            return Err(DomainError::EmptyMaterial);
        }
        Ok(Self {
            key_id,
            bits,
            origin,
            role,
            created_at,
            consumed: false,
            lineage: Lineage {
                root: key_id,
                offset: 0,
                splits: 0,
            },
        })
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }
    pub fn len_bits(&self) -> usize {
        self.bits.len_bits()
    }
    pub fn bits(&self) -> &BitString {
        &self.bits
    }
    pub fn origin(&self) -> &KeyOrigin {
        &self.origin
    }
    pub fn role(&self) -> KeyRole {
        self.role
    }
    pub fn created_at(&self) -> SimTime {
        self.created_at
    }
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
    pub fn lineage(&self) -> Lineage {
        self.lineage
    }
    pub fn to_octets(&self) -> Vec<u8> {
        self.bits.to_octets()
    }

    /// Flips the consumed flag; a block can only be consumed once.
    pub fn mark_consumed(&mut self) -> Result<(), DomainError> {
        if self.consumed {
            return Err(DomainError::AlreadyConsumed(self.key_id));
        }
        self.consumed = true;
        Ok(())
    }

    /// Cuts off the first `n_bits`. The head keeps this block's id; the
    /// remainder gets an id derived from the lineage root and split ordinal.
    pub(crate) fn split(self, n_bits: usize) -> (KeyBlock, KeyBlock) {
        debug_assert!(n_bits > 0 && n_bits < self.len_bits());
        let (head_bits, tail_bits) = self.bits.split_at(n_bits);
        let ordinal = self.lineage.splits + 1;
        let head = KeyBlock {
            key_id: self.key_id,
            bits: head_bits,
            lineage: Lineage {
                splits: ordinal,
                ..self.lineage
            },
            origin: self.origin.clone(),
            ..self
        };
        let tail = KeyBlock {
            key_id: KeyId::derive(&head.lineage.root, ordinal),
            bits: tail_bits,
            origin: head.origin.clone(),
            role: head.role,
            created_at: head.created_at,
            consumed: false,
            lineage: Lineage {
                root: head.lineage.root,
                offset: head.lineage.offset + n_bits,
                splits: ordinal,
            },
        };
        (head, tail)
    }
}

/// Owner-side label for a pool inside a [`super::KeyStore`]: the peer the
/// material is shared with and the direction it protects.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PoolKey {
    pub peer: EntityId,
    pub direction: Direction,
}

impl PoolKey {
    pub fn outbound(peer: EntityId) -> Self {
        Self {
            peer,
            direction: Direction::Outbound,
        }
    }
    pub fn inbound(peer: EntityId) -> Self {
        Self {
            peer,
            direction: Direction::Inbound,
        }
    }
}

/// Keys in an `Outbound` pool protect traffic this owner sends to the peer;
/// the peer holds the mirror material in its `Inbound` pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    Outbound,
    Inbound,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Outbound => Direction::Inbound,
            Direction::Inbound => Direction::Outbound,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn new_block_from_local_rng() {
        let b = KeyBlock::new(
            &mut rng(),
            vec![0xab; 32],
            KeyOrigin::LocalRng,
            KeyRole::Ksa,
            SimTime::ZERO,
        )
        .unwrap();
        assert_eq!(b.len_bits(), 256);
        assert!(!b.is_consumed());
        assert_eq!(b.role(), KeyRole::Ksa);
    }

    #[test]
    fn new_block_records_origin_link() {
        let b = KeyBlock::new(
            &mut rng(),
            vec![1; 32],
            KeyOrigin::QkdLink("4-5".into()),
            KeyRole::Kma,
            SimTime::ZERO,
        )
        .unwrap();
        assert_eq!(b.origin(), &KeyOrigin::QkdLink("4-5".into()));
        assert_eq!(b.len_bits(), 256);
    }

    #[test]
    fn empty_material_is_rejected() {
        let err = KeyBlock::new(
            &mut rng(),
            vec![],
            KeyOrigin::LocalRng,
            KeyRole::Kma,
            SimTime::ZERO,
        )
        .unwrap_err();
        assert_eq!(err, DomainError::EmptyMaterial);
    }

    #[test]
    fn consumed_flag_flips_once() {
        let mut b = KeyBlock::new(
            &mut rng(),
            vec![1; 4],
            KeyOrigin::LocalRng,
            KeyRole::Kma,
            SimTime::ZERO,
        )
        .unwrap();
        b.mark_consumed().unwrap();
        assert!(b.is_consumed());
        assert!(b.mark_consumed().is_err());
    }

    #[test]
    fn extract_unaligned_bits() {
        let src = [0b1010_1100, 0b0101_0011];
        assert_eq!(extract_bits(&src, 2, 8), vec![0b1011_0001]);
        assert_eq!(extract_bits(&src, 4, 4), vec![0b1100_0000]);
        assert_eq!(extract_bits(&src, 0, 12), vec![0b1010_1100, 0b0101_0000]);
    }

    #[test]
    fn concat_unaligned_parts() {
        let a = BitString::from_octets_with_len(vec![0b1110_0000], 3);
        let b = BitString::from_octets(vec![0xff, 0x00]);
        let c = BitString::concat(&[a, b]);
        assert_eq!(c.len_bits(), 19);
        assert_eq!(c.to_octets(), vec![0b1111_1111, 0b1110_0000, 0b0000_0000]);
    }
}
