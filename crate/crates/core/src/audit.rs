//! Policy and flow audits over message traces and pool consumption logs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use base64::Engine;
use serde::Serialize;
use serde_json::Value;

use crate::domain::{find_reuse, AssetClass, EntityId, EntityKind, KeyRole, KeyStore, MessageKind};
use crate::transport::{ChannelRegistry, MsgRecord, TraceRecord};

/// Outcome of one audit. At most [`MAX_REPORTED`] violations are kept;
/// `violation_count` has the full number.
#[derive(Clone, Debug, Default, Serialize)]
pub struct AuditCheck {
    pub name: &'static str,
    pub examined: u64,
    pub violation_count: u64,
    pub violations: Vec<String>,
}

pub const MAX_REPORTED: usize = 20;

impl AuditCheck {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            ..Default::default()
        }
    }

    fn violation(&mut self, what: String) {
        self.violation_count += 1;
        if self.violations.len() < MAX_REPORTED {
            self.violations.push(what);
        }
    }

    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(AuditCheck::passed)
    }

    pub fn check(&self, name: &str) -> Option<&AuditCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("cannot read trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            TraceRecord::parse(&line).map_err(|source| TraceError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn parse_lines<S: AsRef<str>>(lines: &[S]) -> Result<Vec<TraceRecord>, TraceError> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            TraceRecord::parse(l.as_ref()).map_err(|source| TraceError::Parse {
                line: i + 1,
                source,
            })
        })
        .collect()
}

/// Every string value in a JSON document, with the object keys seen.
fn walk<'a>(v: &'a Value, strings: &mut Vec<&'a str>, keys: &mut Vec<&'a str>) {
    match v {
        Value::String(s) => strings.push(s),
        Value::Array(xs) => xs.iter().for_each(|x| walk(x, strings, keys)),
        Value::Object(m) => {
            for (k, x) in m {
                keys.push(k);
                walk(x, strings, keys);
            }
        }
        _ => {}
    }
}

/// Byte-aligned hex windows of every length in `lens` inside `s`.
fn hex_windows<'a>(s: &'a str, lens: &'a BTreeSet<usize>) -> impl Iterator<Item = &'a str> + 'a {
    let bytes = s.as_bytes();
    let mut runs = Vec::new();
    let mut start = None;
    for (i, b) in bytes.iter().enumerate() {
        match (b.is_ascii_hexdigit(), start) {
            (true, None) => start = Some(i),
            (false, Some(st)) => {
                runs.push((st, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(st) = start {
        runs.push((st, bytes.len()));
    }
    runs.into_iter().flat_map(move |(a, b)| {
        lens.iter().flat_map(move |&n| {
            (a..b.saturating_sub(n - 1))
                .filter(move |i| (i - a) % 2 == 0)
                .map(move |i| &s[i..i + n])
        })
    })
}

fn is_kind(id: &EntityId, kinds: &[EntityKind]) -> bool {
    kinds.contains(&id.kind())
}

/// KSA key bits may live only in access-side components: AKMS, UKMS, SAE.
fn ksa_containment(records: &[TraceRecord]) -> AuditCheck {
    let mut c = AuditCheck::new("ksa_containment");
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut hexes = BTreeSet::new();
    let mut encoded = BTreeSet::new();
    for r in records {
        if let TraceRecord::Observe(o) = r {
            if o.role == KeyRole::Ksa {
                c.examined += 1;
                if !is_kind(
                    &o.holder,
                    &[EntityKind::Akms, EntityKind::Ukms, EntityKind::Sae],
                ) {
                    c.violation(format!("{} held KSA {}", o.holder, o.key_id));
                }
                if let Ok(bytes) = hex::decode(&o.hex) {
                    encoded.insert(b64.encode(&bytes));
                }
                hexes.insert(o.hex.clone());
            }
        }
    }
    let lens: BTreeSet<usize> = hexes.iter().map(String::len).collect();
    let carrier = [
        EntityKind::Ckms,
        EntityKind::Controller,
        EntityKind::Manager,
        EntityKind::QkdModule,
    ];
    for r in records {
        match r {
            TraceRecord::Observe(o) if o.role != KeyRole::Ksa && is_kind(&o.holder, &carrier) => {
                if hexes.contains(&o.hex) {
                    c.violation(format!("{} held KSA bits as {:?}", o.holder, o.role));
                }
            }
            TraceRecord::Msg(m) if is_kind(&m.from, &carrier) || is_kind(&m.to, &carrier) => {
                let (mut strings, mut keys) = (Vec::new(), Vec::new());
                walk(&m.payload, &mut strings, &mut keys);
                for s in strings {
                    if encoded.contains(s) || hex_windows(s, &lens).any(|w| hexes.contains(w)) {
                        c.violation(format!(
                            "{} {} -> {} carries KSA bits",
                            m.kind, m.from, m.to
                        ));
                    }
                }
            }
            _ => {}
        }
    }
    c
}

/// Nothing reaching a user-side component names carrier components.
fn topology_hiding(records: &[TraceRecord]) -> AuditCheck {
    let mut c = AuditCheck::new("topology_hiding");
    for m in msgs(records) {
        if !is_kind(&m.to, &[EntityKind::Ukms, EntityKind::Sae]) {
            continue;
        }
        c.examined += 1;
        let (mut strings, mut keys) = (Vec::new(), Vec::new());
        walk(&m.payload, &mut strings, &mut keys);
        if strings
            .iter()
            .any(|s| s.contains("CKMS/") || s.contains("QKD_MODULE/") || s.contains("CONTROLLER/"))
        {
            c.violation(format!("{} to {} names a carrier component", m.kind, m.to));
        }
    }
    c
}

/// User information never enters the carrier network.
fn user_isolation(records: &[TraceRecord]) -> AuditCheck {
    let mut c = AuditCheck::new("user_isolation");
    let carrier = [EntityKind::Ckms, EntityKind::Controller];
    for m in msgs(records) {
        if !is_kind(&m.to, &carrier) && !is_kind(&m.from, &carrier) {
            continue;
        }
        c.examined += 1;
        let (mut strings, mut keys) = (Vec::new(), Vec::new());
        walk(&m.payload, &mut strings, &mut keys);
        if keys
            .iter()
            .any(|k| *k == "user_account" || *k == "account_id")
            || m.asset_class == AssetClass::UserProfile
        {
            c.violation(format!(
                "{} {} -> {} carries user information",
                m.kind, m.from, m.to
            ));
        }
    }
    c
}

/// Keys flow from the network to the users, never back.
fn key_flow_direction(records: &[TraceRecord]) -> AuditCheck {
    let mut c = AuditCheck::new("key_flow_direction");
    for m in msgs(records) {
        let upward = (m.from.kind() == EntityKind::Ukms && m.to.kind() == EntityKind::Akms)
            || (m.from.kind() == EntityKind::Sae && m.to.kind() == EntityKind::Ukms);
        if upward {
            c.examined += 1;
            if m.asset_class == AssetClass::KeyData {
                c.violation(format!(
                    "{} {} -> {} carries key data upward",
                    m.kind, m.from, m.to
                ));
            }
        }
    }
    c
}

/// Every AKMS to controller send is refused by the fabric.
fn akms_controller_separation(records: &[TraceRecord]) -> AuditCheck {
    let mut c = AuditCheck::new("akms_controller_separation");
    for m in msgs(records) {
        let pair = [m.from.kind(), m.to.kind()];
        if pair.contains(&EntityKind::Akms) && pair.contains(&EntityKind::Controller) {
            c.examined += 1;
            if !m.outcome.starts_with("deny:") {
                c.violation(format!(
                    "{} {} -> {} was {}",
                    m.kind, m.from, m.to, m.outcome
                ));
            }
        }
    }
    c
}

/// Delivered messages used a registered channel whose class ceiling admits
/// them; every registered channel has an explicit ceiling.
fn channel_ceiling(records: &[TraceRecord], channels: Option<&ChannelRegistry>) -> AuditCheck {
    let mut c = AuditCheck::new("channel_ceiling");
    if let Some(reg) = channels {
        for ch in reg.iter() {
            c.examined += 1;
            if ch.allowed.is_empty() {
                c.violation(format!("channel {} has no class ceiling", ch.id));
            }
        }
    }
    let by_id: BTreeMap<&str, _> = channels
        .map(|r| r.iter().map(|ch| (ch.id.as_str(), ch)).collect())
        .unwrap_or_default();
    for m in msgs(records).filter(|m| m.delivered()) {
        c.examined += 1;
        match m.channel.as_deref() {
            None => c.violation(format!(
                "{} {} -> {} delivered without a channel",
                m.kind, m.from, m.to
            )),
            Some(id) => {
                if let Some(ch) = by_id.get(id) {
                    if !ch.allowed.contains(&m.asset_class) {
                        c.violation(format!("{} over {} exceeds its ceiling", m.kind, id));
                    }
                }
            }
        }
    }
    c
}

/// USER_PROFILE traffic stays on the AKMS to AAA and UKMS to AKMS channels.
fn profile_confinement(records: &[TraceRecord]) -> AuditCheck {
    let mut c = AuditCheck::new("profile_confinement");
    for m in msgs(records).filter(|m| m.asset_class == AssetClass::UserProfile) {
        c.examined += 1;
        let mut pair = [m.from.kind(), m.to.kind()];
        pair.sort();
        let ok = pair == sorted([EntityKind::Akms, EntityKind::Aaa])
            || pair == sorted([EntityKind::Ukms, EntityKind::Akms]);
        if !ok {
            c.violation(format!("{} {} -> {}", m.kind, m.from, m.to));
        }
    }
    c
}

fn sorted(mut p: [EntityKind; 2]) -> [EntityKind; 2] {
    p.sort();
    p
}

/// A relayed QBN key looks different on every hop.
fn per_hop_reencryption(records: &[TraceRecord]) -> AuditCheck {
    let mut c = AuditCheck::new("per_hop_reencryption");
    let mut seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for m in msgs(records).filter(|m| m.kind == MessageKind::QbnRelay && m.delivered()) {
        if m.payload["stage"] != "hop" {
            continue;
        }
        c.examined += 1;
        let key = m.payload["key_id"].as_str().unwrap_or_default().to_string();
        let wrapped = m.payload["wrapped"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        if !seen.entry(key.clone()).or_default().insert(wrapped) {
            c.violation(format!("QBN {key} repeated a ciphertext across hops"));
        }
    }
    c
}

fn msgs(records: &[TraceRecord]) -> impl Iterator<Item = &MsgRecord> {
    records.iter().filter_map(|r| match r {
        TraceRecord::Msg(m) => Some(m),
        _ => None,
    })
}

/// All trace audits.
pub fn audit_trace(records: &[TraceRecord], channels: Option<&ChannelRegistry>) -> AuditReport {
    AuditReport {
        checks: vec![
            ksa_containment(records),
            topology_hiding(records),
            user_isolation(records),
            key_flow_direction(records),
            akms_controller_separation(records),
            channel_ceiling(records, channels),
            profile_confinement(records),
            per_hop_reencryption(records),
        ],
    }
}

/// No bit of any pool was consumed twice, checked per (key id, offset).
pub fn one_time_use<'a>(stores: impl IntoIterator<Item = &'a KeyStore>) -> AuditCheck {
    let mut c = AuditCheck::new("one_time_use");
    for s in stores {
        let log = s.audit_log();
        c.examined += log.len() as u64;
        if let Some((x, y)) = find_reuse(log) {
            c.violation(format!("{}: {:?} overlaps {:?}", s.owner(), x, y));
        }
    }
    c
}

/// Bits covered by the consumption logs of `stores`.
pub fn logged_bits<'a>(stores: impl IntoIterator<Item = &'a KeyStore>) -> u64 {
    stores
        .into_iter()
        .flat_map(|s| s.audit_log())
        .map(|x| x.len as u64)
        .sum()
}
