//! Topology configuration: nodes, links, SAEs, AAA profiles, channel
//! policies and tunables, loaded from JSON and validated with line-level
//! diagnostics.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crypto_relay::{CipherMode, PropertySet, DEFAULT_GCM_REKEY_AFTER};
use crate::domain::{AssetClass, EntityKind};
use crate::qkd_link_sim::{LinkParams, LinkStatus};
use crate::transport::{ChannelKind, LatencyModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeType {
    User,
    Access,
    Carrier,
    Datacenter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: String,
    #[serde(rename = "type")]
    pub node_type: NodeType,
    pub components: Vec<EntityKind>,
    /// Marks a node that exists only for fault-management testing.
    #[serde(default, rename = "virtual")]
    pub is_virtual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub id: String,
    pub a: String,
    pub b: String,
    pub skr_bps: f64,
    pub skr_jitter: f64,
    pub qber_pct: f64,
    pub qber_jitter: f64,
    pub initial_state: LinkStatus,
    /// True when the parameters are not measured values.
    #[serde(default)]
    pub assumed: bool,
}

impl LinkConfig {
    pub fn params(&self) -> LinkParams {
        LinkParams {
            skr_bps: self.skr_bps,
            skr_jitter: self.skr_jitter,
            qber_pct: self.qber_pct,
            qber_jitter: self.qber_jitter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeConfig {
    pub id: String,
    /// User node whose UKMS serves this SAE.
    pub node: String,
    pub account: String,
    /// Credential the SAE presents at the key delivery API.
    pub credential: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub account_id: String,
    pub allowed_sae_pairs: Vec<(String, String)>,
    pub max_keys_per_day: u64,
    pub max_key_bits: u32,
    pub payment_valid: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Property {
    #[serde(rename = "C")]
    Confidentiality,
    #[serde(rename = "I")]
    Integrity,
    #[serde(rename = "A")]
    Authenticity,
}

/// Class ceiling and protections for every channel between two kinds of
/// component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPolicy {
    pub between: [EntityKind; 2],
    pub kind: ChannelKind,
    pub classes: Vec<AssetClass>,
    pub security: Vec<Property>,
    #[serde(default)]
    pub latency: Option<LatencyModel>,
}

impl ChannelPolicy {
    pub fn property_set(&self) -> PropertySet {
        PropertySet {
            confidentiality: self.security.contains(&Property::Confidentiality),
            integrity: self.security.contains(&Property::Integrity),
            authenticity: self.security.contains(&Property::Authenticity),
        }
    }

    pub fn matches(&self, x: EntityKind, y: EntityKind) -> bool {
        (self.between[0] == x && self.between[1] == y)
            || (self.between[0] == y && self.between[1] == x)
    }
}

/// Relay cipher per leg type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CipherModes {
    /// CKMS to CKMS hops.
    pub carrier: CipherMode,
    /// AKMS to UKMS legs.
    pub access: CipherMode,
    /// AKMS to AKMS transfer of KSA keys under the QBN key.
    pub peer: CipherMode,
}

impl CipherModes {
    pub fn all(mode: CipherMode) -> Self {
        Self {
            carrier: mode,
            access: mode,
            peer: mode,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KmsParams {
    pub pool_capacity_bits: usize,
    pub low_watermark_bits: usize,
    pub status_interval_s: f64,
    pub key_wait_timeout_s: f64,
    pub max_hops: u32,
    /// READY keys a UKMS may hold per SAE pair.
    pub prebuffer_keys: usize,
    pub max_sessions: usize,
    pub gcm_rekey_after: u64,
    pub link_tick_s: f64,
    /// How long an exchange may stay open before the AKMS gives up.
    pub session_timeout_s: f64,
}

impl Default for KmsParams {
    fn default() -> Self {
        Self {
            pool_capacity_bits: 1 << 23,
            low_watermark_bits: 4096,
            status_interval_s: 30.0,
            key_wait_timeout_s: 10.0,
            max_hops: 32,
            prebuffer_keys: 16,
            max_sessions: 4096,
            gcm_rekey_after: DEFAULT_GCM_REKEY_AFTER,
            link_tick_s: 30.0,
            session_timeout_s: 60.0,
        }
    }
}

/// Link weight `w_fixed + alpha / max(available, 1) + beta / max(rate, epsilon)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerParams {
    pub w_fixed: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub ewma_half_life_intervals: f64,
    pub install_timeout_ms: u64,
    /// Precompute routes on every status update. Off: routing is reactive.
    pub proactive: bool,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            w_fixed: 1.0,
            alpha: 1e5,
            beta: 1e4,
            epsilon: 1.0,
            ewma_half_life_intervals: 5.0,
            install_timeout_ms: 1000,
            proactive: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryParams {
    pub attempts: u32,
    pub base_ms: u64,
}

impl Default for RetryParams {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_ms: 200,
        }
    }
}

/// Pre-shared values standing in for smartcard provisioning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Secrets {
    /// Hex; expanded into the AKMS to AKMS authentication pools.
    pub bootstrap: String,
    /// Hex; channel keys for the socket handshake are derived from it.
    pub channel_psk: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub name: String,
    pub seed: u64,
    pub nodes: Vec<NodeConfig>,
    pub links: Vec<LinkConfig>,
    pub saes: Vec<SaeConfig>,
    pub profiles: Vec<ProfileConfig>,
    pub channel_policies: Vec<ChannelPolicy>,
    pub default_latency: LatencyModel,
    pub cipher_modes: CipherModes,
    #[serde(default)]
    pub kms: KmsParams,
    #[serde(default)]
    pub controller: ControllerParams,
    #[serde(default)]
    pub retry: RetryParams,
    pub secrets: Secrets,
}

/// One problem found in a config file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}:{}: {}", self.line, self.column, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("CONFIG_INVALID\n{}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Diagnostic>),
    #[error("cannot read config: {0}")]
    Io(String),
}

impl ConfigError {
    pub fn diagnostics(&self) -> &[Diagnostic] {
        match self {
            ConfigError::Invalid(d) => d,
            ConfigError::Io(_) => &[],
        }
    }
}

/// Finds the line and column of `needle` in `text`, searching from the
/// first occurrence of `after` if given.
fn locate(text: &str, after: Option<&str>, needle: &str) -> (usize, usize) {
    let start = after.and_then(|a| text.find(a)).unwrap_or(0);
    let pos = text[start..].find(needle).map(|p| p + start);
    match pos {
        Some(p) => {
            let line = text[..p].matches('\n').count() + 1;
            let col = p - text[..p].rfind('\n').map_or(0, |i| i + 1) + 1;
            (line, col)
        }
        None => (1, 1),
    }
}

impl TopologyConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses and validates. Every problem found is reported with its line.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: TopologyConfig = serde_json::from_str(text).map_err(|e| {
            ConfigError::Invalid(vec![Diagnostic {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            }])
        })?;
        let problems = cfg.check(text);
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn node(&self, id: &str) -> Option<&NodeConfig> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn datacenter(&self) -> Option<&NodeConfig> {
        self.nodes
            .iter()
            .find(|n| n.node_type == NodeType::Datacenter)
    }

    pub fn link(&self, id: &str) -> Option<&LinkConfig> {
        self.links.iter().find(|l| l.id == id)
    }

    /// The access node a user node hangs off.
    pub fn access_of(&self, user_node: &str) -> Option<&str> {
        self.links.iter().find_map(|l| {
            let other = if l.a == user_node {
                &l.b
            } else if l.b == user_node {
                &l.a
            } else {
                return None;
            };
            (self.node(other)?.node_type == NodeType::Access).then_some(other.as_str())
        })
    }

    pub fn policy_for(&self, x: EntityKind, y: EntityKind) -> Option<&ChannelPolicy> {
        self.channel_policies.iter().find(|p| p.matches(x, y))
    }

    fn check(&self, text: &str) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut err = |after: Option<&str>, needle: &str, message: String| {
            let (line, column) = locate(text, after, needle);
            out.push(Diagnostic {
                line,
                column,
                message,
            });
        };
        let quoted = |s: &str| format!("\"{s}\"");

        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if n.id.is_empty() || n.id.contains('/') {
                err(
                    Some("\"nodes\""),
                    &quoted(&n.id),
                    format!("node id {:?} must be non-empty and free of '/'", n.id),
                );
            }
            if !ids.insert(n.id.as_str()) {
                err(
                    Some("\"nodes\""),
                    &quoted(&n.id),
                    format!("duplicate node id {:?}", n.id),
                );
            }
            let has = |k: EntityKind| n.components.contains(&k);
            let expected: &[EntityKind] = match n.node_type {
                NodeType::User => &[EntityKind::Ukms],
                NodeType::Access => &[EntityKind::Akms, EntityKind::Ckms],
                NodeType::Carrier => &[EntityKind::Ckms],
                NodeType::Datacenter => {
                    &[EntityKind::Controller, EntityKind::Manager, EntityKind::Aaa]
                }
            };
            let exact = expected.iter().all(|k| has(*k)) && n.components.len() == expected.len();
            if !exact {
                err(
                    Some("\"nodes\""),
                    &quoted(&n.id),
                    format!(
                        "{:?} node {} must host exactly {:?}",
                        n.node_type,
                        n.id,
                        expected.iter().map(|k| k.as_str()).collect::<Vec<_>>()
                    ),
                );
            }
        }
        let dcs = self
            .nodes
            .iter()
            .filter(|n| n.node_type == NodeType::Datacenter)
            .count();
        if dcs != 1 {
            err(
                Some("\"nodes\""),
                "\"nodes\"",
                format!("expected exactly one DATACENTER node, found {dcs}"),
            );
        }

        let mut link_ids = BTreeSet::new();
        let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for l in &self.links {
            let at = quoted(&l.id);
            if !link_ids.insert(l.id.as_str()) {
                err(
                    Some("\"links\""),
                    &at,
                    format!("duplicate link id {:?}", l.id),
                );
            }
            for end in [&l.a, &l.b] {
                match self.node(end) {
                    None => err(
                        Some(&at),
                        &quoted(end),
                        format!("link {} references unknown node {:?}", l.id, end),
                    ),
                    Some(n) if n.node_type == NodeType::Datacenter => err(
                        Some(&at),
                        &quoted(end),
                        format!("link {} cannot end at datacenter {}", l.id, end),
                    ),
                    Some(_) => {}
                }
            }
            if l.a == l.b {
                err(
                    Some("\"links\""),
                    &at,
                    format!("link {} is a self loop", l.id),
                );
            }
            if let (Some(na), Some(nb)) = (self.node(&l.a), self.node(&l.b)) {
                let user_ends = [na, nb]
                    .iter()
                    .filter(|n| n.node_type == NodeType::User)
                    .count();
                let access_ends = [na, nb]
                    .iter()
                    .filter(|n| n.node_type == NodeType::Access)
                    .count();
                if user_ends == 2 || (user_ends == 1 && access_ends != 1) {
                    err(
                        Some("\"links\""),
                        &at,
                        format!("link {}: a user node may only link to an access node", l.id),
                    );
                }
            }
            if !(l.skr_bps.is_finite() && l.skr_bps >= 0.0) {
                err(
                    Some(&at),
                    "\"skr_bps\"",
                    format!("link {}: skr_bps must be >= 0", l.id),
                );
            }
            if !(0.0..=50.0).contains(&l.qber_pct) {
                err(
                    Some(&at),
                    "\"qber_pct\"",
                    format!("link {}: qber_pct must lie in [0, 50]", l.id),
                );
            }
            if !(l.skr_jitter >= 0.0 && l.qber_jitter >= 0.0) {
                err(
                    Some(&at),
                    "\"skr_jitter\"",
                    format!("link {}: jitter must be >= 0", l.id),
                );
            }
            adj.entry(l.a.as_str()).or_default().push(l.b.as_str());
            adj.entry(l.b.as_str()).or_default().push(l.a.as_str());
        }

        for n in self.nodes.iter().filter(|n| n.node_type == NodeType::User) {
            let accesses = self
                .links
                .iter()
                .filter(|l| l.a == n.id || l.b == n.id)
                .count();
            if accesses != 1 || self.access_of(&n.id).is_none() {
                err(
                    Some("\"nodes\""),
                    &quoted(&n.id),
                    format!("user node {} must link to exactly one access node", n.id),
                );
            }
        }

        // connectivity over non-datacenter nodes, all links up
        let graph_nodes: Vec<&str> = self
            .nodes
            .iter()
            .filter(|n| n.node_type != NodeType::Datacenter)
            .map(|n| n.id.as_str())
            .collect();
        if let Some(first) = graph_nodes.first() {
            let mut seen = BTreeSet::from([*first]);
            let mut queue = VecDeque::from([*first]);
            while let Some(u) = queue.pop_front() {
                for v in adj.get(u).into_iter().flatten() {
                    if seen.insert(*v) {
                        queue.push_back(*v);
                    }
                }
            }
            for n in &graph_nodes {
                if !seen.contains(n) {
                    err(
                        Some("\"nodes\""),
                        &quoted(n),
                        format!("node {n} is unreachable even with every link up"),
                    );
                }
            }
        }

        let mut sae_ids = BTreeSet::new();
        for s in &self.saes {
            if !sae_ids.insert(s.id.as_str()) {
                err(
                    Some("\"saes\""),
                    &quoted(&s.id),
                    format!("duplicate SAE id {:?}", s.id),
                );
            }
            match self.node(&s.node) {
                Some(n) if n.node_type == NodeType::User => {}
                _ => err(
                    Some("\"saes\""),
                    &quoted(&s.node),
                    format!("SAE {} must attach to a USER node", s.id),
                ),
            }
            if s.account.is_empty() {
                err(
                    Some("\"saes\""),
                    &quoted(&s.id),
                    format!("SAE {} has an empty account", s.id),
                );
            }
        }
        let mut accounts = BTreeSet::new();
        for p in &self.profiles {
            if !accounts.insert(p.account_id.as_str()) {
                err(
                    Some("\"profiles\""),
                    &quoted(&p.account_id),
                    format!("duplicate profile {:?}", p.account_id),
                );
            }
            for (x, y) in &p.allowed_sae_pairs {
                for s in [x, y] {
                    if !sae_ids.contains(s.as_str()) {
                        err(
                            Some("\"profiles\""),
                            &quoted(s),
                            format!("profile {} names unknown SAE {:?}", p.account_id, s),
                        );
                    }
                }
            }
        }

        for (i, p) in self.channel_policies.iter().enumerate() {
            if self.channel_policies[..i]
                .iter()
                .any(|q| q.matches(p.between[0], p.between[1]))
            {
                err(
                    Some("\"channel_policies\""),
                    "\"between\"",
                    format!("duplicate channel policy for {:?}", p.between),
                );
            }
            if p.classes.is_empty() {
                err(
                    Some("\"channel_policies\""),
                    "\"classes\"",
                    format!("channel policy {:?} allows no class", p.between),
                );
            }
        }

        for (name, value) in [
            ("bootstrap", &self.secrets.bootstrap),
            ("channel_psk", &self.secrets.channel_psk),
        ] {
            if hex::decode(value).map_or(true, |b| b.len() < 16) {
                err(
                    Some("\"secrets\""),
                    &quoted(name),
                    format!("secret {name} must be hex of at least 16 bytes"),
                );
            }
        }
        if self.kms.status_interval_s <= 0.0 || self.kms.link_tick_s <= 0.0 {
            err(
                Some("\"kms\""),
                "\"kms\"",
                "intervals must be positive".into(),
            );
        }
        out.sort_by_key(|d| (d.line, d.column));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_reports_one_based_positions() {
        let text = "{\n  \"a\": 1,\n  \"b\": \"x\"\n}";
        assert_eq!(locate(text, None, "\"x\""), (3, 8));
        assert_eq!(locate(text, Some("\"b\""), "\"x\""), (3, 8));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = TopologyConfig::parse("{\n  \"name\": \"t\",\n  oops\n}").unwrap_err();
        assert_eq!(err.diagnostics()[0].line, 3);
        assert!(err.to_string().starts_with("CONFIG_INVALID"));
    }
}
