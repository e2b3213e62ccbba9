use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, Key, KeyInit as _, Nonce};
use hmac::{Hmac, KeyInit as _, Mac};
use sha2::Sha256;

use super::frame::{CipherMode, WrappedKey, TAG_LEN};
use super::{KeyPurpose, KeySource, RelayError};
use crate::domain::KeyBlock;

/// One-time MAC key length for OTP frames.
pub const OTP_MAC_KEY_BITS: usize = 128;
pub const GCM_KEY_BITS: usize = 256;
/// Wraps per GCM key before the channel pulls a fresh key from its pool.
pub const DEFAULT_GCM_REKEY_AFTER: u64 = 1 << 20;

type HmacSha256 = Hmac<Sha256>;

fn xor_pad(data: &[u8], pad: &[u8], len_bits: usize) -> Vec<u8> {
    let mut out: Vec<u8> = data.iter().zip(pad).map(|(d, p)| d ^ p).collect();
    let tail = len_bits % 8;
    if tail != 0 {
        if let Some(last) = out.last_mut() {
            *last &= 0xffu8 << (8 - tail);
        }
    }
    out
}

fn otp_tag(mac_key: &[u8], header: &[u8], plaintext: &[u8]) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(mac_key).expect("HMAC accepts any key length");
    mac.update(header);
    mac.update(plaintext);
    mac
}

fn ensure(source: &dyn KeySource, purpose: KeyPurpose, needed: usize) -> Result<(), RelayError> {
    let available = source.available(purpose);
    if available < needed {
        return Err(RelayError::InsufficientKey { needed, available });
    }
    Ok(())
}

fn ensure_otp(source: &dyn KeySource, len_bits: usize) -> Result<(), RelayError> {
    if source.separate_mac_pool() {
        ensure(source, KeyPurpose::Pad, len_bits)?;
        ensure(source, KeyPurpose::MacKey, OTP_MAC_KEY_BITS)
    } else {
        ensure(source, KeyPurpose::Pad, len_bits + OTP_MAC_KEY_BITS)
    }
}

fn otp_wrap(
    plain: &[u8],
    len_bits: usize,
    source: &mut dyn KeySource,
) -> Result<WrappedKey, RelayError> {
    ensure_otp(source, len_bits)?;
    let pad = source.take(KeyPurpose::Pad, len_bits)?.to_octets();
    let mac_key = source
        .take(KeyPurpose::MacKey, OTP_MAC_KEY_BITS)?
        .to_octets();
    let nonce = [0u8; 12];
    let header = WrappedKey::header(CipherMode::Otp, &nonce, len_bits as u32);
    let ciphertext = xor_pad(plain, &pad, len_bits);
    let full = otp_tag(&mac_key, &header, plain).finalize().into_bytes();
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(&full[..TAG_LEN]);
    Ok(WrappedKey {
        mode: CipherMode::Otp,
        nonce,
        len_bits: len_bits as u32,
        ciphertext,
        tag,
        consumed_kma_bits: len_bits + OTP_MAC_KEY_BITS,
    })
}

fn otp_unwrap(w: &WrappedKey, source: &mut dyn KeySource) -> Result<Vec<u8>, RelayError> {
    let len_bits = w.len_bits as usize;
    ensure_otp(source, len_bits)?;
    let pad = source.take(KeyPurpose::Pad, len_bits)?.to_octets();
    let mac_key = source
        .take(KeyPurpose::MacKey, OTP_MAC_KEY_BITS)?
        .to_octets();
    let plain = xor_pad(&w.ciphertext, &pad, len_bits);
    let header = WrappedKey::header(CipherMode::Otp, &w.nonce, w.len_bits);
    otp_tag(&mac_key, &header, &plain)
        .verify_truncated_left(&w.tag)
        .map_err(|_| RelayError::AuthFail)?;
    Ok(plain)
}

/// AES-256-GCM state for one direction of one channel.
///
/// Nonces are `epoch(4, BE) ‖ counter(8, BE)`; the epoch advances every time
/// a new 256-bit key is drawn from the pool, so a nonce never repeats under
/// one key.
#[derive(Clone)]
pub struct GcmChannel {
    key: Option<[u8; 32]>,
    epoch: u32,
    counter: u64,
    last_seen: Option<u64>,
    rekey_after: u64,
    can_rekey: bool,
}

impl std::fmt::Debug for GcmChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GcmChannel")
            .field("epoch", &self.epoch)
            .field("counter", &self.counter)
            .finish_non_exhaustive()
    }
}

impl GcmChannel {
    /// Long-lived channel that rekeys from its pool every `rekey_after` wraps.
    pub fn new(rekey_after: u64) -> Self {
        Self {
            key: None,
            epoch: 0,
            counter: 0,
            last_seen: None,
            rekey_after,
            can_rekey: true,
        }
    }

    /// Session bound to a single key; exhausting its nonce budget is an error.
    pub fn single_key(rekey_after: u64) -> Self {
        Self {
            can_rekey: false,
            ..Self::new(rekey_after)
        }
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    fn draw_key(&mut self, source: &mut dyn KeySource) -> Result<(), RelayError> {
        if self.key.is_some() && !self.can_rekey {
            return Err(RelayError::NonceExhaustion);
        }
        ensure(source, KeyPurpose::CipherKey, GCM_KEY_BITS)?;
        let material = source
            .take(KeyPurpose::CipherKey, GCM_KEY_BITS)?
            .to_octets();
        let mut key = [0u8; 32];
        key.copy_from_slice(&material);
        self.key = Some(key);
        self.epoch = self
            .epoch
            .checked_add(1)
            .ok_or(RelayError::NonceExhaustion)?;
        self.counter = 0;
        self.last_seen = None;
        Ok(())
    }

    fn nonce(epoch: u32, counter: u64) -> [u8; 12] {
        let mut n = [0u8; 12];
        n[..4].copy_from_slice(&epoch.to_be_bytes());
        n[4..].copy_from_slice(&counter.to_be_bytes());
        n
    }

    pub fn wrap(
        &mut self,
        plain: &[u8],
        len_bits: usize,
        source: &mut dyn KeySource,
    ) -> Result<WrappedKey, RelayError> {
        let mut consumed = 0;
        if self.key.is_none() || self.counter >= self.rekey_after {
            self.draw_key(source)?;
            consumed = GCM_KEY_BITS;
        }
        let nonce = Self::nonce(self.epoch, self.counter);
        self.counter += 1;
        let header = WrappedKey::header(CipherMode::Aes256Gcm, &nonce, len_bits as u32);
        let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&self.key.expect("key drawn")));
        let sealed = cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: plain,
                    aad: &header,
                },
            )
            .map_err(|_| RelayError::Malformed("encryption failed"))?;
        let (ct, tag_bytes) = sealed.split_at(sealed.len() - TAG_LEN);
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(tag_bytes);
        Ok(WrappedKey {
            mode: CipherMode::Aes256Gcm,
            nonce,
            len_bits: len_bits as u32,
            ciphertext: ct.to_vec(),
            tag,
            consumed_kma_bits: consumed,
        })
    }

    pub fn unwrap(
        &mut self,
        w: &WrappedKey,
        source: &mut dyn KeySource,
    ) -> Result<Vec<u8>, RelayError> {
        let epoch = u32::from_be_bytes(w.nonce[..4].try_into().expect("4 bytes"));
        let counter = u64::from_be_bytes(w.nonce[4..].try_into().expect("8 bytes"));
        if epoch < self.epoch || epoch == 0 {
            return Err(RelayError::AuthFail);
        }
        while self.epoch < epoch {
            self.draw_key(source)?;
        }
        if self.last_seen.is_some_and(|seen| counter <= seen) {
            return Err(RelayError::AuthFail);
        }
        let header = WrappedKey::header(CipherMode::Aes256Gcm, &w.nonce, w.len_bits);
        let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&self.key.expect("key drawn")));
        let mut sealed = w.ciphertext.clone();
        sealed.extend_from_slice(&w.tag);
        let plain = cipher
            .decrypt(
                Nonce::from_slice(&w.nonce),
                Payload {
                    msg: &sealed,
                    aad: &header,
                },
            )
            .map_err(|_| RelayError::AuthFail)?;
        self.last_seen = Some(counter);
        Ok(plain)
    }
}

/// Cipher state for one direction of a relay leg.
#[derive(Clone, Debug)]
pub enum ChannelCipher {
    Otp,
    Gcm(GcmChannel),
}

impl ChannelCipher {
    pub fn new(mode: CipherMode) -> Self {
        match mode {
            CipherMode::Otp => ChannelCipher::Otp,
            CipherMode::Aes256Gcm => ChannelCipher::Gcm(GcmChannel::new(DEFAULT_GCM_REKEY_AFTER)),
        }
    }

    pub fn mode(&self) -> CipherMode {
        match self {
            ChannelCipher::Otp => CipherMode::Otp,
            ChannelCipher::Gcm(_) => CipherMode::Aes256Gcm,
        }
    }

    /// KMA bits a wrap of `len_bits` would need if no key is cached.
    pub fn cost_bits(mode: CipherMode, len_bits: usize) -> usize {
        match mode {
            CipherMode::Otp => len_bits + OTP_MAC_KEY_BITS,
            CipherMode::Aes256Gcm => GCM_KEY_BITS,
        }
    }

    pub fn wrap_bytes(
        &mut self,
        plain: &[u8],
        len_bits: usize,
        source: &mut dyn KeySource,
    ) -> Result<WrappedKey, RelayError> {
        if len_bits == 0 || plain.len() != len_bits.div_ceil(8) {
            return Err(RelayError::Malformed("plaintext length mismatch"));
        }
        match self {
            ChannelCipher::Otp => otp_wrap(plain, len_bits, source),
            ChannelCipher::Gcm(g) => g.wrap(plain, len_bits, source),
        }
    }

    pub fn wrap(
        &mut self,
        plain: &KeyBlock,
        source: &mut dyn KeySource,
    ) -> Result<WrappedKey, RelayError> {
        self.wrap_bytes(&plain.to_octets(), plain.len_bits(), source)
    }

    /// Plaintext octets; authentication is checked before anything is
    /// returned.
    pub fn unwrap(
        &mut self,
        w: &WrappedKey,
        source: &mut dyn KeySource,
    ) -> Result<Vec<u8>, RelayError> {
        if w.mode != self.mode() {
            return Err(RelayError::AuthFail);
        }
        match self {
            ChannelCipher::Otp => otp_unwrap(w, source),
            ChannelCipher::Gcm(g) => g.unwrap(w, source),
        }
    }
}
