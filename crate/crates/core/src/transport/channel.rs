use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crypto_relay::PropertySet;
use crate::domain::{AssetClass, EntityId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChannelKind {
    /// Between co-located components of one node.
    IntraNode,
    /// Classical channel alongside a QKD link between two KMSs.
    QkdLink,
    /// Mutually authenticated channel between remote components.
    Authenticated,
    /// SAE-facing key delivery interface.
    Api,
}

/// Per-message delivery delay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum LatencyModel {
    Fixed { ms: f64 },
    Uniform { min_ms: f64, max_ms: f64 },
}

impl LatencyModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Duration {
        let ms = match *self {
            LatencyModel::Fixed { ms } => ms,
            LatencyModel::Uniform { min_ms, max_ms } if max_ms > min_ms => {
                rng.random_range(min_ms..max_ms)
            }
            LatencyModel::Uniform { min_ms, .. } => min_ms,
        };
        Duration::from_micros((ms.max(0.0) * 1000.0).round() as u64)
    }
}

/// One registered point-to-point channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub id: String,
    pub a: EntityId,
    pub b: EntityId,
    pub kind: ChannelKind,
    /// Class ceiling: the only asset classes this channel may carry.
    pub allowed: BTreeSet<AssetClass>,
    pub security: PropertySet,
    pub latency: LatencyModel,
    pub up: bool,
}

impl ChannelSpec {
    pub fn connects(&self, x: &EntityId, y: &EntityId) -> bool {
        (&self.a == x && &self.b == y) || (&self.a == y && &self.b == x)
    }
}

fn pair_key(x: &EntityId, y: &EntityId) -> (EntityId, EntityId) {
    if x <= y {
        (x.clone(), y.clone())
    } else {
        (y.clone(), x.clone())
    }
}

/// All channels of one deployment, looked up by endpoint pair.
#[derive(Clone, Debug, Default)]
pub struct ChannelRegistry {
    channels: BTreeMap<(EntityId, EntityId), ChannelSpec>,
}

impl ChannelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a channel, replacing any previous one between the same
    /// endpoints.
    pub fn insert(&mut self, spec: ChannelSpec) {
        self.channels.insert(pair_key(&spec.a, &spec.b), spec);
    }

    pub fn lookup(&self, x: &EntityId, y: &EntityId) -> Option<&ChannelSpec> {
        self.channels.get(&pair_key(x, y))
    }

    pub fn set_up(&mut self, x: &EntityId, y: &EntityId, up: bool) -> bool {
        match self.channels.get_mut(&pair_key(x, y)) {
            Some(c) => {
                c.up = up;
                true
            }
            None => false,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ChannelSpec> {
        self.channels.values()
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}
