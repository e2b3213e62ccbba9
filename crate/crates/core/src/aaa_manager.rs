//! The AAA device (validation, directory translation, accounting) and the
//! QKDN Manager's monitoring subset (device registry, heartbeats, alarms).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::domain::{
    AccountingReport, AlarmKind, AlarmReport, CorrelationId, EnrichedRequest, EntityId, ErrorCode,
    ExchangeOutcome, Heartbeat, Payload, ProtocolMessage, ServiceProperties, Severity, SimTime,
};
use crate::engine::{Command, Ctx, Input, Timer};

/// Contract parameters of one account.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserProfile {
    pub account_id: String,
    pub allowed_sae_pairs: BTreeSet<(EntityId, EntityId)>,
    pub max_keys_per_day: u64,
    pub max_key_bits: u32,
    pub payment_valid: bool,
}

impl UserProfile {
    fn allows(&self, a: &EntityId, b: &EntityId) -> bool {
        self.allowed_sae_pairs.contains(&(a.clone(), b.clone()))
            || self.allowed_sae_pairs.contains(&(b.clone(), a.clone()))
    }
}

/// Directory row: which UKMS and AKMS serve an SAE.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationEntry {
    pub sae: EntityId,
    pub ukms: EntityId,
    pub akms: EntityId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountingRecord {
    pub account_id: String,
    pub correlation_id: CorrelationId,
    pub keys_delivered: u64,
    pub bits_delivered: u64,
    pub timestamp: SimTime,
    pub outcome: ExchangeOutcome,
}

/// Per-account, per-day counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Usage {
    pub delivered_keys: u64,
    pub delivered_bits: u64,
    /// Keys granted to exchanges still in progress.
    pub reserved_keys: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AaaMode {
    /// Full validation of account, payment, peer pair and quota.
    Strict,
    /// Accepts every request, as a demonstrator deployment does. Directory
    /// translation still applies.
    Permissive,
}

#[derive(Clone, Debug)]
struct Reservation {
    account: String,
    day: u64,
    keys: u64,
    props: ServiceProperties,
}

#[derive(Debug)]
pub struct Aaa {
    id: EntityId,
    manager: EntityId,
    mode: AaaMode,
    profiles: BTreeMap<String, UserProfile>,
    directory: BTreeMap<EntityId, TranslationEntry>,
    usage: BTreeMap<(String, u64), Usage>,
    reservations: BTreeMap<CorrelationId, Reservation>,
    rejected: BTreeMap<CorrelationId, ErrorCode>,
    records: Vec<AccountingRecord>,
    recorded: BTreeSet<CorrelationId>,
    heartbeat_every: Duration,
    heartbeat_seq: u64,
}

impl Aaa {
    pub fn new(
        id: EntityId,
        manager: EntityId,
        mode: AaaMode,
        profiles: Vec<UserProfile>,
        directory: Vec<TranslationEntry>,
        heartbeat_every: Duration,
    ) -> Self {
        Self {
            id,
            manager,
            mode,
            profiles: profiles
                .into_iter()
                .map(|p| (p.account_id.clone(), p))
                .collect(),
            directory: directory.into_iter().map(|e| (e.sae.clone(), e)).collect(),
            usage: BTreeMap::new(),
            reservations: BTreeMap::new(),
            rejected: BTreeMap::new(),
            records: Vec::new(),
            recorded: BTreeSet::new(),
            heartbeat_every,
            heartbeat_seq: 0,
        }
    }

    pub fn id(&self) -> &EntityId {
        &self.id
    }

    pub fn mode(&self) -> AaaMode {
        self.mode
    }

    pub fn profile(&self, account: &str) -> Option<&UserProfile> {
        self.profiles.get(account)
    }

    pub fn put_profile(&mut self, profile: UserProfile) {
        self.profiles.insert(profile.account_id.clone(), profile);
    }

    pub fn records(&self) -> &[AccountingRecord] {
        &self.records
    }

    pub fn usage(&self, account: &str, day: u64) -> Usage {
        self.usage
            .get(&(account.to_string(), day))
            .copied()
            .unwrap_or_default()
    }

    /// Sum of delivered keys over the accounting log for one day.
    pub fn delivered_keys_from_records(&self, account: &str, day: u64) -> u64 {
        self.records
            .iter()
            .filter(|r| {
                r.account_id == account
                    && r.timestamp.day() == day
                    && r.outcome == ExchangeOutcome::Delivered
            })
            .map(|r| r.keys_delivered)
            .sum()
    }

    pub fn resolve(&self, sae: &EntityId) -> Result<(EntityId, EntityId), ErrorCode> {
        self.directory
            .get(sae)
            .map(|e| (e.ukms.clone(), e.akms.clone()))
            .ok_or(ErrorCode::UnknownSae)
    }

    fn check(
        &self,
        req: &EnrichedRequest,
        day: u64,
    ) -> Result<(Option<&UserProfile>, u64), ErrorCode> {
        let inner = &req.inner;
        let keys = inner.number as u64;
        if self.mode == AaaMode::Permissive {
            return Ok((self.profiles.get(&req.user_account), u64::MAX));
        }
        let profile = self
            .profiles
            .get(&req.user_account)
            .ok_or(ErrorCode::UnknownUser)?;
        if !profile.payment_valid {
            return Err(ErrorCode::PaymentInvalid);
        }
        if !profile.allows(&inner.master_sae, &inner.slave_sae) {
            return Err(ErrorCode::PeerNotAllowed);
        }
        if inner.size_bits > profile.max_key_bits {
            return Err(ErrorCode::OversizeRequest);
        }
        let used = self.usage(&profile.account_id, day);
        let committed = used.delivered_keys + used.reserved_keys;
        if committed + keys > profile.max_keys_per_day {
            return Err(ErrorCode::QuotaExceeded);
        }
        Ok((Some(profile), profile.max_keys_per_day - committed - keys))
    }

    /// Validates a request. On success the keys are reserved against the
    /// daily quota; every rejection is written to the accounting log.
    pub fn validate(
        &mut self,
        req: &EnrichedRequest,
        corr: CorrelationId,
        now: SimTime,
    ) -> Result<ServiceProperties, ErrorCode> {
        if let Some(r) = self.reservations.get(&corr) {
            return Ok(r.props.clone());
        }
        if let Some(code) = self.rejected.get(&corr) {
            return Err(*code);
        }
        let day = now.day();
        let outcome = self.check(req, day).and_then(|(profile, remaining)| {
            let (peer_ukms, peer_akms) = self.resolve(&req.inner.slave_sae)?;
            Ok(ServiceProperties {
                account_id: req.user_account.clone(),
                max_keys_per_day: profile.map_or(u64::MAX, |p| p.max_keys_per_day),
                max_key_bits: profile.map_or(u32::MAX, |p| p.max_key_bits),
                keys_remaining_today: remaining,
                peer_ukms,
                peer_akms,
            })
        });
        match outcome {
            Ok(props) => {
                let keys = req.inner.number as u64;
                self.usage
                    .entry((req.user_account.clone(), day))
                    .or_default()
                    .reserved_keys += keys;
                self.reservations.insert(
                    corr,
                    Reservation {
                        account: req.user_account.clone(),
                        day,
                        keys,
                        props: props.clone(),
                    },
                );
                Ok(props)
            }
            Err(code) => {
                self.rejected.insert(corr, code);
                self.push_record(AccountingRecord {
                    account_id: req.user_account.clone(),
                    correlation_id: corr,
                    keys_delivered: 0,
                    bits_delivered: 0,
                    timestamp: now,
                    outcome: ExchangeOutcome::Rejected(code),
                });
                Err(code)
            }
        }
    }

    fn push_record(&mut self, rec: AccountingRecord) {
        self.recorded.insert(rec.correlation_id);
        self.records.push(rec);
    }

    /// Appends the terminal record of a validated exchange.
    pub fn record_delivery(
        &mut self,
        corr: CorrelationId,
        report: &AccountingReport,
        now: SimTime,
    ) -> Result<&AccountingRecord, ErrorCode> {
        if self.recorded.contains(&corr) {
            return Err(ErrorCode::DuplicateRecord);
        }
        let reservation = self.reservations.remove(&corr);
        if let Some(r) = &reservation {
            if let Some(u) = self.usage.get_mut(&(r.account.clone(), r.day)) {
                u.reserved_keys = u.reserved_keys.saturating_sub(r.keys);
            }
        }
        let delivered = report.outcome == ExchangeOutcome::Delivered;
        let (keys, bits) = if delivered {
            (report.keys as u64, report.bits)
        } else {
            (0, 0)
        };
        if delivered {
            let day = reservation.as_ref().map_or(now.day(), |r| r.day);
            let u = self
                .usage
                .entry((report.account_id.clone(), day))
                .or_default();
            u.delivered_keys += keys;
            u.delivered_bits += bits;
        }
        self.push_record(AccountingRecord {
            account_id: report.account_id.clone(),
            correlation_id: corr,
            keys_delivered: keys,
            bits_delivered: bits,
            timestamp: now,
            outcome: report.outcome,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn handle(&mut self, input: Input, ctx: &mut Ctx) {
        match input {
            Input::Start => ctx.after(Duration::ZERO, Timer::Heartbeat),
            Input::Timer(Timer::Heartbeat) => {
                self.heartbeat_seq += 1;
                ctx.send(
                    &self.manager,
                    crate::engine::NO_CORRELATION,
                    Payload::Heartbeat(Heartbeat {
                        seq: self.heartbeat_seq,
                    }),
                );
                ctx.after(self.heartbeat_every, Timer::Heartbeat);
            }
            Input::Message(msg) => self.on_message(msg, ctx),
            Input::Command(Command::PutProfile(p)) => self.put_profile(p),
            _ => {}
        }
    }

    fn on_message(&mut self, msg: ProtocolMessage, ctx: &mut Ctx) {
        let corr = msg.correlation_id;
        match msg.body {
            Payload::Validate(req) => match self.validate(&req, corr, ctx.now) {
                Ok(props) => ctx.send(&msg.from, corr, Payload::ServiceProperties(props)),
                Err(code) => ctx.error(&msg.from, corr, code),
            },
            Payload::Accounting(report) => {
                if let Err(code) = self.record_delivery(corr, &report, ctx.now) {
                    ctx.error(&msg.from, corr, code);
                }
            }
            _ => {}
        }
    }
}

/// One entry of the Manager's alarm log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub timestamp: SimTime,
    pub source: EntityId,
    pub severity: Severity,
    pub kind: AlarmKind,
    pub subject: Option<String>,
}

impl AlarmRecord {
    pub const CSV_HEADER: &'static str = "timestamp,source,severity,kind";

    pub fn csv_row(&self) -> String {
        let sev = match self.severity {
            Severity::Warn => "WARN",
            Severity::Critical => "CRITICAL",
        };
        format!(
            "{},{},{},{}",
            self.timestamp,
            self.source,
            sev,
            self.kind.as_str()
        )
    }
}

pub fn write_alarms_csv<W: Write>(mut w: W, alarms: &[AlarmRecord]) -> std::io::Result<()> {
    writeln!(w, "{}", AlarmRecord::CSV_HEADER)?;
    for a in alarms {
        writeln!(w, "{}", a.csv_row())?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct Manager {
    id: EntityId,
    controller: EntityId,
    registry: BTreeSet<EntityId>,
    heartbeat_expected: BTreeSet<EntityId>,
    last_seen: BTreeMap<EntityId, SimTime>,
    lapsed: BTreeSet<EntityId>,
    alarms: Vec<AlarmRecord>,
    interval: Duration,
}

impl Manager {
    /// `heartbeat_expected` lists the registered devices that send
    /// heartbeats every `interval`.
    pub fn new(
        id: EntityId,
        controller: EntityId,
        registry: BTreeSet<EntityId>,
        heartbeat_expected: BTreeSet<EntityId>,
        interval: Duration,
    ) -> Self {
        Self {
            id,
            controller,
            registry,
            heartbeat_expected,
            last_seen: BTreeMap::new(),
            lapsed: BTreeSet::new(),
            alarms: Vec::new(),
            interval,
        }
    }

    pub fn id(&self) -> &EntityId {
        &self.id
    }

    pub fn alarms(&self) -> &[AlarmRecord] {
        &self.alarms
    }

    pub fn alarms_since(&self, since: SimTime) -> Vec<AlarmRecord> {
        self.alarms
            .iter()
            .filter(|a| a.timestamp >= since)
            .cloned()
            .collect()
    }

    pub fn is_registered(&self, id: &EntityId) -> bool {
        self.registry.contains(id)
    }

    fn push(
        &mut self,
        now: SimTime,
        source: EntityId,
        severity: Severity,
        kind: AlarmKind,
        subject: Option<String>,
    ) {
        self.alarms.push(AlarmRecord {
            timestamp: now,
            source,
            severity,
            kind,
            subject,
        });
    }

    pub fn handle(&mut self, input: Input, ctx: &mut Ctx) {
        match input {
            Input::Start => ctx.after(self.interval, Timer::HeartbeatCheck),
            Input::Timer(Timer::HeartbeatCheck) => {
                self.check_heartbeats(ctx.now);
                ctx.after(self.interval, Timer::HeartbeatCheck);
            }
            Input::Message(msg) => self.ingest(msg, ctx),
            _ => {}
        }
    }

    fn check_heartbeats(&mut self, now: SimTime) {
        let limit = self.interval * 3;
        let lapsed: Vec<EntityId> = self
            .heartbeat_expected
            .iter()
            .filter(|d| !self.lapsed.contains(*d))
            .filter(|d| {
                now.saturating_since(self.last_seen.get(*d).copied().unwrap_or(SimTime::ZERO))
                    > limit
            })
            .cloned()
            .collect();
        for d in lapsed {
            self.lapsed.insert(d.clone());
            self.push(now, d, Severity::Critical, AlarmKind::HeartbeatLapse, None);
        }
    }

    fn ingest(&mut self, msg: ProtocolMessage, ctx: &mut Ctx) {
        if !self.registry.contains(&msg.from) {
            self.push(
                ctx.now,
                msg.from.clone(),
                Severity::Warn,
                AlarmKind::UnknownSender,
                Some(msg.kind().as_str().to_string()),
            );
            return;
        }
        match msg.body {
            Payload::Heartbeat(_) => {
                self.last_seen.insert(msg.from.clone(), ctx.now);
                self.lapsed.remove(&msg.from);
            }
            Payload::Alarm(AlarmReport {
                severity,
                kind,
                subject,
            }) => {
                self.push(ctx.now, msg.from.clone(), severity, kind, subject.clone());
                if matches!(kind, AlarmKind::LinkDown | AlarmKind::LinkUp) {
                    ctx.alarm(&self.controller, severity, kind, subject);
                }
            }
            _ => {}
        }
    }
}
