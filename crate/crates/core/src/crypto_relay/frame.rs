use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::RelayError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CipherMode {
    Otp,
    #[serde(rename = "AES256GCM")]
    Aes256Gcm,
}

impl CipherMode {
    fn tag(self) -> u8 {
        match self {
            CipherMode::Otp => 0x01,
            CipherMode::Aes256Gcm => 0x02,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, RelayError> {
        match tag {
            0x01 => Ok(CipherMode::Otp),
            0x02 => Ok(CipherMode::Aes256Gcm),
            _ => Err(RelayError::Malformed("unknown cipher mode")),
        }
    }
}

pub(crate) const HEADER_LEN: usize = 1 + 12 + 4;
pub(crate) const TAG_LEN: usize = 16;

/// Key material protected for one relay leg.
///
/// Wire layout: `mode(1) ‖ nonce(12) ‖ length(4, BE, bits) ‖ ciphertext ‖ tag(16)`.
/// The nonce is all zero for OTP frames.
#[derive(Clone)]
pub struct WrappedKey {
    pub mode: CipherMode,
    pub nonce: [u8; 12],
    pub len_bits: u32,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
    /// KMA bits the wrapping side consumed; not part of the wire frame.
    pub consumed_kma_bits: usize,
}

impl WrappedKey {
    pub(crate) fn header(mode: CipherMode, nonce: &[u8; 12], len_bits: u32) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0] = mode.tag();
        h[1..13].copy_from_slice(nonce);
        h[13..17].copy_from_slice(&len_bits.to_be_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&Self::header(self.mode, &self.nonce, self.len_bits));
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RelayError> {
        if bytes.len() < HEADER_LEN + TAG_LEN {
            return Err(RelayError::Malformed("frame too short"));
        }
        let mode = CipherMode::from_tag(bytes[0])?;
        let mut nonce = [0u8; 12];
        nonce.copy_from_slice(&bytes[1..13]);
        let len_bits = u32::from_be_bytes(bytes[13..17].try_into().expect("4 bytes"));
        let ct_len = (len_bits as usize).div_ceil(8);
        if bytes.len() != HEADER_LEN + ct_len + TAG_LEN {
            return Err(RelayError::Malformed("length field does not match frame"));
        }
        if mode == CipherMode::Otp && nonce != [0u8; 12] {
            return Err(RelayError::Malformed("OTP frame with non-zero nonce"));
        }
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&bytes[HEADER_LEN + ct_len..]);
        Ok(Self {
            mode,
            nonce,
            len_bits,
            ciphertext: bytes[HEADER_LEN..HEADER_LEN + ct_len].to_vec(),
            tag,
            consumed_kma_bits: 0,
        })
    }
}

impl PartialEq for WrappedKey {
    fn eq(&self, other: &Self) -> bool {
        self.encode() == other.encode()
    }
}

impl Eq for WrappedKey {}

impl fmt::Debug for WrappedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WrappedKey")
            .field("mode", &self.mode)
            .field("len_bits", &self.len_bits)
            .field("consumed_kma_bits", &self.consumed_kma_bits)
            .finish_non_exhaustive()
    }
}

impl Serialize for WrappedKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.encode()))
    }
}

impl<'de> Deserialize<'de> for WrappedKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(text).map_err(serde::de::Error::custom)?;
        WrappedKey::decode(&bytes).map_err(serde::de::Error::custom)
    }
}
