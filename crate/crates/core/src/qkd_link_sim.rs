//! Simulated QKD module pairs. Each link emits bit-identical key blocks at
//! both ends at its configured secret-key rate and reports jittered
//! SKR/QBER telemetry. QBER is telemetry only and never touches the key
//! material.

use std::io::Write;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    BitString, EntityId, KeyBlock, KeyId, KeyOrigin, KeyRole, KeyStore, LinkId, PoolKey, SimTime,
};

/// Emission quantum.
pub const BLOCK_BITS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LinkStatus {
    Up,
    Down,
}

impl LinkStatus {
    pub fn is_up(self) -> bool {
        self == LinkStatus::Up
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LinkStatus::Up => "UP",
            LinkStatus::Down => "DOWN",
        }
    }
}

/// Rate and error parameters of one link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// Mean secret-key rate, bits per second.
    pub skr_bps: f64,
    /// Relative standard deviation of the SKR samples.
    pub skr_jitter: f64,
    /// Mean QBER in percent.
    pub qber_pct: f64,
    /// Absolute standard deviation of the QBER samples, percentage points.
    pub qber_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinkError {
    #[error("link {0}: skr_bps must be non-negative and finite")]
    InvalidRate(LinkId),
    #[error("link {0}: qber_pct must lie in [0, 50]")]
    InvalidQber(LinkId),
    #[error("link {0}: jitter must be non-negative and finite")]
    InvalidJitter(LinkId),
}

/// One telemetry sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Telemetry {
    pub timestamp: SimTime,
    pub link_id: LinkId,
    pub skr_bps: f64,
    pub qber_pct: f64,
    pub state: LinkStatus,
}

impl Telemetry {
    pub const CSV_HEADER: &'static str = "timestamp,link_id,skr_bps,qber_pct,state";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.4},{}",
            self.timestamp,
            self.link_id,
            self.skr_bps,
            self.qber_pct,
            self.state.as_str()
        )
    }
}

/// Writes telemetry records as CSV.
pub fn write_telemetry_csv<W: Write>(mut w: W, records: &[Telemetry]) -> std::io::Result<()> {
    writeln!(w, "{}", Telemetry::CSV_HEADER)?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Output of one tick: the same blocks for both endpoints, in the same
/// order, plus a telemetry sample.
#[derive(Debug)]
pub struct TickOutput {
    pub a_blocks: Vec<KeyBlock>,
    pub b_blocks: Vec<KeyBlock>,
    pub telemetry: Telemetry,
}

#[derive(Debug)]
pub struct QkdLink {
    link_id: LinkId,
    endpoint_a: EntityId,
    endpoint_b: EntityId,
    params: LinkParams,
    state: LinkStatus,
    seed: u64,
    key_stream: ChaCha20Rng,
    telemetry_rng: ChaCha8Rng,
    carry_bits: f64,
    emitted_bits: u64,
}

impl QkdLink {
    pub fn new(
        link_id: impl Into<LinkId>,
        endpoint_a: EntityId,
        endpoint_b: EntityId,
        params: LinkParams,
        state: LinkStatus,
        seed: u64,
    ) -> Result<Self, LinkError> {
        let link_id = link_id.into();
        if !(params.skr_bps.is_finite() && params.skr_bps >= 0.0) {
            return Err(LinkError::InvalidRate(link_id));
        }
        if !(params.qber_pct.is_finite() && (0.0..=50.0).contains(&params.qber_pct)) {
            return Err(LinkError::InvalidQber(link_id));
        }
        let jitter_ok = |j: f64| j.is_finite() && j >= 0.0;
        if !jitter_ok(params.skr_jitter) || !jitter_ok(params.qber_jitter) {
            return Err(LinkError::InvalidJitter(link_id));
        }
        Ok(Self {
            link_id,
            endpoint_a,
            endpoint_b,
            params,
            state,
            seed,
            key_stream: ChaCha20Rng::seed_from_u64(seed),
            telemetry_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7e1e_6e7e_u64),
            carry_bits: 0.0,
            emitted_bits: 0,
        })
    }

    pub fn link_id(&self) -> &LinkId {
        &self.link_id
    }
    pub fn endpoints(&self) -> (&EntityId, &EntityId) {
        (&self.endpoint_a, &self.endpoint_b)
    }
    pub fn params(&self) -> LinkParams {
        self.params
    }
    pub fn state(&self) -> LinkStatus {
        self.state
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn emitted_bits(&self) -> u64 {
        self.emitted_bits
    }

    /// Takes effect from the next tick. Returns whether the state changed.
    pub fn set_state(&mut self, state: LinkStatus) -> bool {
        let changed = self.state != state;
        self.state = state;
        changed
    }

    fn next_block(&mut self, len_bits: usize, now: SimTime) -> KeyBlock {
        let id = KeyId::random(&mut self.key_stream);
        let mut octets = vec![0u8; len_bits.div_ceil(8)];
        self.key_stream.fill_bytes(&mut octets);
        KeyBlock::with_id(
            id,
            BitString::from_octets_with_len(octets, len_bits),
            KeyOrigin::QkdLink(self.link_id.clone()),
            KeyRole::Kma,
            now,
        )
        .expect("blocks are non-empty")
    }

    /// Advances the link by `dt`. Emission is `skr_bps * dt` bits, cut into
    /// whole 256-bit blocks with the fractional remainder carried over.
    pub fn tick(&mut self, now: SimTime, dt: Duration) -> TickOutput {
        let mut blocks = Vec::new();
        if self.state.is_up() {
            self.carry_bits += self.params.skr_bps * dt.as_secs_f64();
            let n = (self.carry_bits / BLOCK_BITS as f64).floor();
            self.carry_bits -= n * BLOCK_BITS as f64;
            for _ in 0..n as u64 {
                blocks.push(self.next_block(BLOCK_BITS, now));
            }
            self.emitted_bits += n as u64 * BLOCK_BITS as u64;
        }
        let telemetry = self.sample_telemetry(now);
        TickOutput {
            b_blocks: blocks.clone(),
            a_blocks: blocks,
            telemetry,
        }
    }

    /// Draws one monitoring sample without emitting key. Telemetry has its
    /// own random stream, so this yields the same samples `tick` reports.
    pub fn sample_telemetry(&mut self, now: SimTime) -> Telemetry {
        if !self.state.is_up() {
            return Telemetry {
                timestamp: now,
                link_id: self.link_id.clone(),
                skr_bps: 0.0,
                qber_pct: 0.0,
                state: LinkStatus::Down,
            };
        }
        let skr = sample_clamped(
            &mut self.telemetry_rng,
            self.params.skr_bps,
            self.params.skr_bps * self.params.skr_jitter,
            0.0,
            f64::INFINITY,
        );
        let qber = sample_clamped(
            &mut self.telemetry_rng,
            self.params.qber_pct,
            self.params.qber_jitter,
            0.0,
            50.0,
        );
        Telemetry {
            timestamp: now,
            link_id: self.link_id.clone(),
            skr_bps: skr,
            qber_pct: qber,
            state: LinkStatus::Up,
        }
    }

    /// Material for pre-filling both endpoints' pools before a benchmark,
    /// drawn from the same stream as regular emission. Blocks are large
    /// (`chunk_bits`) to keep pool bookkeeping small.
    pub fn prefill(&mut self, total_bits: usize, chunk_bits: usize, now: SimTime) -> Vec<KeyBlock> {
        let mut out = Vec::new();
        let mut left = total_bits;
        while left > 0 {
            let n = left.min(chunk_bits);
            out.push(self.next_block(n, now));
            left -= n;
        }
        out
    }
}

fn sample_clamped<R: rand::Rng>(rng: &mut R, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    let v = if std > 0.0 {
        Normal::new(mean, std).expect("finite std").sample(rng)
    } else {
        mean
    };
    v.clamp(lo, hi)
}

/// Blocks stored and dropped by one delivery.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DeliveryStats {
    pub stored_blocks: u64,
    pub dropped_blocks: u64,
}

/// Hands a tick's blocks to the KMSs at both ends of a link.
///
/// Each block protects one direction: it lands in the sender's outbound
/// pool and the receiver's inbound pool. The direction with less material
/// gets the block. Both copies are stored or both are dropped, so the two
/// ends never diverge.
pub fn deliver_to_kms(
    kms_a: &EntityId,
    store_a: &mut KeyStore,
    kms_b: &EntityId,
    store_b: &mut KeyStore,
    blocks: Vec<KeyBlock>,
) -> DeliveryStats {
    let mut stats = DeliveryStats::default();
    for block in blocks {
        let a_to_b = store_a.available_bits(&PoolKey::outbound(kms_b.clone()))
            <= store_a.available_bits(&PoolKey::inbound(kms_b.clone()));
        let (pool_a, pool_b) = if a_to_b {
            (
                PoolKey::outbound(kms_b.clone()),
                PoolKey::inbound(kms_a.clone()),
            )
        } else {
            (
                PoolKey::inbound(kms_b.clone()),
                PoolKey::outbound(kms_a.clone()),
            )
        };
        store_pair(store_a, &pool_a, store_b, &pool_b, block, &mut stats);
    }
    stats
}

/// Stores `block` in exactly the given pair of mirror pools.
pub fn deliver_directed(
    store_a: &mut KeyStore,
    pool_a: &PoolKey,
    store_b: &mut KeyStore,
    pool_b: &PoolKey,
    blocks: Vec<KeyBlock>,
) -> DeliveryStats {
    let mut stats = DeliveryStats::default();
    for block in blocks {
        store_pair(store_a, pool_a, store_b, pool_b, block, &mut stats);
    }
    stats
}

fn store_pair(
    store_a: &mut KeyStore,
    pool_a: &PoolKey,
    store_b: &mut KeyStore,
    pool_b: &PoolKey,
    block: KeyBlock,
    stats: &mut DeliveryStats,
) {
    let len = block.len_bits();
    if store_a.room_bits(pool_a) >= len && store_b.room_bits(pool_b) >= len {
        store_a
            .refill(pool_a, block.clone())
            .expect("room checked and ids fresh");
        store_b
            .refill(pool_b, block)
            .expect("room checked and ids fresh");
        stats.stored_blocks += 1;
    } else {
        store_a.record_drop(pool_a, len);
        store_b.record_drop(pool_b, len);
        stats.dropped_blocks += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(skr: f64, state: LinkStatus) -> QkdLink {
        QkdLink::new(
            "4-5",
            EntityId::qkd_module("node-4:4-5"),
            EntityId::qkd_module("node-5:4-5"),
            LinkParams {
                skr_bps: skr,
                skr_jitter: 0.05,
                qber_pct: 2.4,
                qber_jitter: 0.5,
            },
            state,
            9,
        )
        .unwrap()
    }

    #[test]
    fn two_kbps_for_thirty_seconds_carries_ninety_six_bits() {
        // oracle: 2000 * 30 = 60000 = 234 * 256 + 96
        let mut l = link(2000.0, LinkStatus::Up);
        let out = l.tick(SimTime::from_secs(30), Duration::from_secs(30));
        assert_eq!(out.a_blocks.len(), 234);
        assert_eq!(l.carry_bits, 96.0);
        let a: Vec<_> = out
            .a_blocks
            .iter()
            .map(|b| (b.key_id(), b.to_octets()))
            .collect();
        let b: Vec<_> = out
            .b_blocks
            .iter()
            .map(|b| (b.key_id(), b.to_octets()))
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn telemetry_without_key_matches_ticks() {
        let (mut a, mut b) = (link(2000.0, LinkStatus::Up), link(2000.0, LinkStatus::Up));
        for i in 0..5 {
            let t = SimTime::from_secs(30 * i);
            assert_eq!(
                a.tick(t, Duration::from_secs(30)).telemetry,
                b.sample_telemetry(t)
            );
        }
    }

    #[test]
    fn down_link_emits_nothing_and_resumes_stream() {
        let mut l = link(2000.0, LinkStatus::Down);
        assert!(l
            .tick(SimTime::ZERO, Duration::from_secs(30))
            .a_blocks
            .is_empty());
        assert!(l.set_state(LinkStatus::Up));
        let first = l.tick(SimTime::ZERO, Duration::from_secs(1)).a_blocks;
        let mut fresh = link(2000.0, LinkStatus::Up);
        let expect = fresh.tick(SimTime::ZERO, Duration::from_secs(1)).a_blocks;
        assert_eq!(first[0].to_octets(), expect[0].to_octets());
    }

    #[test]
    fn slow_link_emits_a_block_every_eighty_five_hundredths_tick() {
        // 256 bits / 300 bps = 0.853 s; over 30 s ticks -> 35.16 blocks per tick
        let mut l = link(300.0, LinkStatus::Up);
        let total: usize = (0..1000)
            .map(|i| {
                l.tick(SimTime::from_secs(30 * i), Duration::from_secs(30))
                    .a_blocks
                    .len()
            })
            .sum();
        let expect = 300.0 * 30.0 * 1000.0 / 256.0;
        assert!((total as f64 - expect).abs() <= 1.0, "{total} vs {expect}");
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let bad = |skr: f64, qber: f64| {
            QkdLink::new(
                "x",
                EntityId::qkd_module("a"),
                EntityId::qkd_module("b"),
                LinkParams {
                    skr_bps: skr,
                    skr_jitter: 0.0,
                    qber_pct: qber,
                    qber_jitter: 0.0,
                },
                LinkStatus::Up,
                0,
            )
        };
        assert!(matches!(bad(-1.0, 1.0), Err(LinkError::InvalidRate(_))));
        assert!(matches!(bad(1.0, 51.0), Err(LinkError::InvalidQber(_))));
        assert!(bad(0.0, 50.0).is_ok());
    }

    #[test]
    fn delivery_is_joint_at_both_ends() {
        let (ka, kb) = (EntityId::ckms("node-4"), EntityId::ckms("node-5"));
        let mut sa = KeyStore::new(ka.clone(), 512, 0);
        let mut sb = KeyStore::new(kb.clone(), 512, 0);
        let mut l = link(256.0 * 6.0, LinkStatus::Up);
        let out = l.tick(SimTime::ZERO, Duration::from_secs(1));
        let stats = deliver_to_kms(&ka, &mut sa, &kb, &mut sb, out.a_blocks);
        assert_eq!(stats.stored_blocks, 4);
        assert_eq!(stats.dropped_blocks, 2);
        for (mine, theirs) in [
            (PoolKey::outbound(kb.clone()), PoolKey::inbound(ka.clone())),
            (PoolKey::inbound(kb.clone()), PoolKey::outbound(ka.clone())),
        ] {
            assert_eq!(sa.available_bits(&mine), 512);
            assert_eq!(sb.available_bits(&theirs), 512);
            let x = sa.consume(&mine, 512, SimTime::ZERO).unwrap();
            let y = sb.consume(&theirs, 512, SimTime::ZERO).unwrap();
            let bits = |v: Vec<KeyBlock>| v.iter().map(|b| b.to_octets()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }
}
