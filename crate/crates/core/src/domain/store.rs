use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use super::{DomainError, EntityId, KeyBlock, KeyId, PoolKey, SimTime};

/// Running totals of one pool. At every step
/// `refilled_bits - consumed_bits - dropped_bits == available_bits`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    pub refilled_bits: u64,
    pub consumed_bits: u64,
    pub dropped_bits: u64,
    pub dropped_blocks: u64,
    pub available_bits: u64,
}

/// One consumed stretch of key material, identified by the lineage root it
/// was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ConsumedSegment {
    pub root: KeyId,
    pub offset: usize,
    pub len: usize,
    pub at: SimTime,
}

#[derive(Debug, Default)]
struct Pool {
    blocks: VecDeque<KeyBlock>,
    stats: PoolStats,
}

/// Per-peer pools of unconsumed key blocks owned by one KMS.
///
/// Every mutation goes through `&mut self`, so a store applies its
/// consume/refill calls in one total order.
#[derive(Debug)]
pub struct KeyStore {
    owner: EntityId,
    pools: BTreeMap<PoolKey, Pool>,
    ids: BTreeSet<KeyId>,
    low_watermark_bits: usize,
    capacity_bits: usize,
    audit: Vec<ConsumedSegment>,
}

impl KeyStore {
    pub fn new(owner: EntityId, capacity_bits: usize, low_watermark_bits: usize) -> Self {
        Self {
            owner,
            pools: BTreeMap::new(),
            ids: BTreeSet::new(),
            low_watermark_bits,
            capacity_bits,
            audit: Vec::new(),
        }
    }

    pub fn owner(&self) -> &EntityId {
        &self.owner
    }

    pub fn capacity_bits(&self) -> usize {
        self.capacity_bits
    }

    pub fn available_bits(&self, pool: &PoolKey) -> usize {
        self.pools
            .get(pool)
            .map_or(0, |p| p.stats.available_bits as usize)
    }

    /// Free space left in the pool before `refill` starts dropping.
    pub fn room_bits(&self, pool: &PoolKey) -> usize {
        self.capacity_bits.saturating_sub(self.available_bits(pool))
    }

    pub fn below_low_watermark(&self, pool: &PoolKey) -> bool {
        self.available_bits(pool) < self.low_watermark_bits
    }

    pub fn stats(&self, pool: &PoolKey) -> PoolStats {
        self.pools.get(pool).map(|p| p.stats).unwrap_or_default()
    }

    pub fn pool_keys(&self) -> impl Iterator<Item = &PoolKey> {
        self.pools.keys()
    }

    /// Removes exactly `n_bits` from the front of the pool, splitting the
    /// last block when needed. Returned blocks are marked consumed.
    pub fn consume(
        &mut self,
        pool_key: &PoolKey,
        n_bits: usize,
        now: SimTime,
    ) -> Result<Vec<KeyBlock>, DomainError> {
        let available = self.available_bits(pool_key);
        if available < n_bits {
            return Err(DomainError::InsufficientKey {
                requested: n_bits,
                available,
            });
        }
        let mut out = Vec::new();
        if n_bits == 0 {
            return Ok(out);
        }
        let pool = self.pools.get_mut(pool_key).expect("non-empty pool exists");
        let mut remaining = n_bits;
        while remaining > 0 {
            let block = pool.blocks.pop_front().expect("available bits accounted");
            self.ids.remove(&block.key_id());
            let mut taken = if block.len_bits() > remaining {
                let (head, tail) = block.split(remaining);
                self.ids.insert(tail.key_id());
                pool.blocks.push_front(tail);
                head
            } else {
                block
            };
            taken.mark_consumed()?;
            remaining -= taken.len_bits();
            let lineage = taken.lineage();
            self.audit.push(ConsumedSegment {
                root: lineage.root,
                offset: lineage.offset,
                len: taken.len_bits(),
                at: now,
            });
            out.push(taken);
        }
        pool.stats.consumed_bits += n_bits as u64;
        pool.stats.available_bits -= n_bits as u64;
        Ok(out)
    }

    /// Appends an unconsumed block, keeping the pool ordered by `created_at`.
    /// Over capacity the block is dropped and counted.
    pub fn refill(&mut self, pool_key: &PoolKey, block: KeyBlock) -> Result<(), DomainError> {
        if block.is_consumed() {
            return Err(DomainError::AlreadyConsumed(block.key_id()));
        }
        if self.ids.contains(&block.key_id()) {
            return Err(DomainError::DuplicateKeyId(block.key_id()));
        }
        let len = block.len_bits() as u64;
        let capacity = self.capacity_bits as u64;
        let pool = self.pools.entry(pool_key.clone()).or_default();
        pool.stats.refilled_bits += len;
        if pool.stats.available_bits + len > capacity {
            pool.stats.dropped_bits += len;
            pool.stats.dropped_blocks += 1;
            return Err(DomainError::CapacityExceeded {
                capacity_bits: self.capacity_bits,
                block_bits: block.len_bits(),
            });
        }
        pool.stats.available_bits += len;
        self.ids.insert(block.key_id());
        let pos = pool
            .blocks
            .iter()
            .rposition(|b| b.created_at() <= block.created_at())
            .map_or(0, |i| i + 1);
        pool.blocks.insert(pos, block);
        Ok(())
    }

    /// Counts a block that was offered but not stored, e.g. because the
    /// mirror pool at the other end of the link was full.
    pub fn record_drop(&mut self, pool_key: &PoolKey, bits: usize) {
        let pool = self.pools.entry(pool_key.clone()).or_default();
        pool.stats.refilled_bits += bits as u64;
        pool.stats.dropped_bits += bits as u64;
        pool.stats.dropped_blocks += 1;
    }

    /// Every consumption recorded by this store, in order.
    pub fn audit_log(&self) -> &[ConsumedSegment] {
        &self.audit
    }

    pub fn total_consumed_bits(&self) -> u64 {
        self.pools.values().map(|p| p.stats.consumed_bits).sum()
    }
}

/// Finds two audit segments that cover the same bit of the same lineage
/// root, if any.
pub fn find_reuse(segments: &[ConsumedSegment]) -> Option<(ConsumedSegment, ConsumedSegment)> {
    let mut sorted: Vec<_> = segments.to_vec();
    sorted.sort_by_key(|s| (s.root, s.offset));
    sorted.windows(2).find_map(|w| {
        (w[0].root == w[1].root && w[0].offset + w[0].len > w[1].offset).then_some((w[0], w[1]))
    })
}
