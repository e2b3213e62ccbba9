//! Access-node KMS: validates requests with AAA, peers with the remote
//! AKMS, generates QBN and KSA keys, drives the carrier relay and pushes
//! KSA keys down to the user-node KMS.
//!
//! Every exchange has an initiator (the AKMS serving the master SAE) and a
//! responder. The responder generates both the QBN and the KSA keys.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::crypto_relay::{
    ChannelCipher, CipherMode, GcmChannel, KeyPurpose, KeySource, MemorySource, PoolHandle,
    RelayError, SplitSource, WrappedKey, GCM_KEY_BITS,
};
use crate::domain::{
    AccountingReport, AlarmKind, AlarmReport, BitString, CorrelationId, EnrichedRequest, EntityId,
    EntityKind, ErrorCode, ErrorReport, ExchangeOutcome, Heartbeat, KeyBlock, KeyId, KeyOrigin,
    KeyRole, KeyStore, KsaAck, KsaBundle, Payload, PeerAck, PeerInit, PlainMaterial, PoolKey,
    ProtocolMessage, QbnAck, QbnRelay, SaeRequest, ServiceProperties, Severity, SimTime,
};
use crate::engine::{Command, Ctx, Input, Timer, NO_CORRELATION};
use crate::rng::{Health, HybridRng};

/// Bits added to a bootstrap pool each time it runs low.
pub const BOOTSTRAP_CHUNK_BITS: usize = 1 << 16;

/// Authentication keys pre-shared between every pair of AKMSs, expanded
/// deterministically from a provisioned secret. Both ends derive the same
/// stream per direction and consume it in the same order.
#[derive(Debug)]
pub struct PreShared {
    me: EntityId,
    secret: Vec<u8>,
    store: KeyStore,
    streams: BTreeMap<PoolKey, ChaCha20Rng>,
}

impl PreShared {
    pub fn new(me: EntityId, secret: Vec<u8>) -> Self {
        Self {
            store: KeyStore::new(me.clone(), usize::MAX / 2, 0),
            me,
            secret,
            streams: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &KeyStore {
        &self.store
    }

    fn stream_for(&mut self, pool: &PoolKey) -> &mut ChaCha20Rng {
        let (sender, receiver) = match pool.direction {
            crate::domain::Direction::Outbound => (&self.me, &pool.peer),
            crate::domain::Direction::Inbound => (&pool.peer, &self.me),
        };
        let secret = &self.secret;
        self.streams.entry(pool.clone()).or_insert_with(|| {
            let mut h = Sha256::new();
            h.update(secret);
            h.update(sender.to_string().as_bytes());
            h.update([0u8]);
            h.update(receiver.to_string().as_bytes());
            ChaCha20Rng::from_seed(h.finalize().into())
        })
    }

    fn top_up(&mut self, pool: &PoolKey, needed: usize, now: SimTime) {
        while self.store.available_bits(pool) < needed {
            let stream = self.stream_for(pool);
            let mut id = [0u8; 16];
            stream.fill_bytes(&mut id);
            let mut bits = vec![0u8; BOOTSTRAP_CHUNK_BITS / 8];
            stream.fill_bytes(&mut bits);
            let block = KeyBlock::with_id(
                KeyId::from_bytes(id),
                BitString::from_octets(bits),
                KeyOrigin::PreShared,
                KeyRole::Kma,
                now,
            )
            .expect("chunk is non-empty");
            self.store
                .refill(pool, block)
                .expect("bootstrap store is unbounded");
        }
    }

    pub fn source(&mut self, pool: PoolKey, now: SimTime) -> PreSharedSource<'_> {
        PreSharedSource {
            ps: self,
            pool,
            now,
        }
    }
}

pub struct PreSharedSource<'a> {
    ps: &'a mut PreShared,
    pool: PoolKey,
    now: SimTime,
}

impl KeySource for PreSharedSource<'_> {
    fn available(&self, _purpose: KeyPurpose) -> usize {
        // expanded on demand
        usize::MAX / 4
    }

    fn take(&mut self, purpose: KeyPurpose, n_bits: usize) -> Result<BitString, RelayError> {
        self.ps.top_up(&self.pool, n_bits, self.now);
        PoolHandle::new(&mut self.ps.store, self.pool.clone(), self.now).take(purpose, n_bits)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AkmsParams {
    pub retry_attempts: u32,
    pub retry_base: Duration,
    pub session_timeout: Duration,
    pub max_sessions: usize,
    pub heartbeat_interval: Duration,
    /// Cipher on the AKMS to UKMS leg.
    pub access_cipher: CipherMode,
    /// Cipher on the AKMS to AKMS leg, keyed by the QBN.
    pub peer_cipher: CipherMode,
    pub gcm_rekey_after: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Validating,
    Peered,
    QbnInFlight,
    Secured,
    KsaSent,
    Done,
    Failed(ErrorCode),
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Done | SessionState::Failed(_))
    }

    fn rank(self) -> u8 {
        match self {
            SessionState::Validating => 0,
            SessionState::Peered => 1,
            SessionState::QbnInFlight => 2,
            SessionState::Secured => 3,
            SessionState::KsaSent => 4,
            SessionState::Done => 5,
            SessionState::Failed(_) => 6,
        }
    }

    /// Transitions only move forward; FAILED is reachable from any live
    /// state and nothing leaves a terminal state.
    pub fn can_move_to(self, next: SessionState) -> bool {
        if self.is_terminal() {
            return false;
        }
        matches!(next, SessionState::Failed(_)) || next.rank() > self.rank()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Initiator,
    Responder,
}

#[derive(Debug)]
struct Session {
    role: Role,
    state: SessionState,
    req: SaeRequest,
    account: Option<String>,
    props: Option<ServiceProperties>,
    peer: Option<EntityId>,
    remote_ukms: Option<EntityId>,
    /// Responder: the CKMS the QBN must reach.
    sending_ckms: Option<EntityId>,
    enriched: Option<EnrichedRequest>,
    peer_init: Option<PeerInit>,
    qbn: Option<BitString>,
    ksa_ids: Vec<KeyId>,
    ukms_acked: bool,
    peer_acked: bool,
}

impl Session {
    fn new(role: Role, state: SessionState, req: SaeRequest) -> Self {
        Self {
            role,
            state,
            req,
            account: None,
            props: None,
            peer: None,
            remote_ukms: None,
            sending_ckms: None,
            enriched: None,
            peer_init: None,
            qbn: None,
            ksa_ids: Vec::new(),
            ukms_acked: false,
            peer_acked: false,
        }
    }
}

/// Counters exposed for metrics.
#[derive(Clone, Debug, Default, Serialize)]
pub struct AkmsStats {
    pub completed: u64,
    pub failed: BTreeMap<String, u64>,
    /// Transitions refused by the session state machine.
    pub illegal_transitions: u64,
}

#[derive(Debug)]
pub struct Akms {
    id: EntityId,
    ukms: EntityId,
    ckms: EntityId,
    aaa: EntityId,
    manager: EntityId,
    store: KeyStore,
    bootstrap: PreShared,
    rng: HybridRng,
    ids: ChaCha20Rng,
    rng_alarmed: bool,
    ukms_out: ChannelCipher,
    params: AkmsParams,
    sessions: BTreeMap<CorrelationId, Session>,
    finished: BTreeMap<CorrelationId, SessionState>,
    stats: AkmsStats,
    heartbeat_seq: u64,
    qbn_consumed_bits: u64,
}

impl Akms {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: EntityId,
        ukms: EntityId,
        ckms: EntityId,
        aaa: EntityId,
        manager: EntityId,
        store: KeyStore,
        bootstrap_secret: Vec<u8>,
        rng: HybridRng,
        id_seed: u64,
        params: AkmsParams,
    ) -> Self {
        let ukms_out = match params.access_cipher {
            CipherMode::Otp => ChannelCipher::Otp,
            CipherMode::Aes256Gcm => ChannelCipher::Gcm(GcmChannel::new(params.gcm_rekey_after)),
        };
        Self {
            bootstrap: PreShared::new(id.clone(), bootstrap_secret),
            id,
            ukms,
            ckms,
            aaa,
            manager,
            store,
            rng,
            ids: ChaCha20Rng::seed_from_u64(id_seed),
            rng_alarmed: false,
            ukms_out,
            params,
            sessions: BTreeMap::new(),
            finished: BTreeMap::new(),
            stats: AkmsStats::default(),
            heartbeat_seq: 0,
            qbn_consumed_bits: 0,
        }
    }

    pub fn id(&self) -> &EntityId {
        &self.id
    }

    pub fn store(&self) -> &KeyStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut KeyStore {
        &mut self.store
    }

    pub fn bootstrap(&self) -> &PreShared {
        &self.bootstrap
    }

    /// Key bits spent on the AKMS to AKMS leg: QBN pad or cipher key plus
    /// bootstrap authentication keys.
    pub fn qbn_consumed_bits(&self) -> u64 {
        self.qbn_consumed_bits
    }

    pub fn peer_leg_consumed_bits(&self) -> u64 {
        self.qbn_consumed_bits + self.bootstrap.store().total_consumed_bits()
    }

    pub fn stats(&self) -> &AkmsStats {
        &self.stats
    }

    pub fn rng(&self) -> &HybridRng {
        &self.rng
    }

    pub fn session_state(&self, corr: &CorrelationId) -> Option<SessionState> {
        self.sessions
            .get(corr)
            .map(|s| s.state)
            .or_else(|| self.finished.get(corr).copied())
    }

    pub fn open_sessions(&self) -> usize {
        self.sessions.len()
    }

    /// QBN length: a one-time pad for the whole KSA bundle, or one AES key.
    fn qbn_bits(&self, req: &SaeRequest) -> usize {
        match self.params.peer_cipher {
            CipherMode::Otp => req.total_bits(),
            CipherMode::Aes256Gcm => GCM_KEY_BITS,
        }
    }

    fn peer_cipher(&self) -> ChannelCipher {
        match self.params.peer_cipher {
            CipherMode::Otp => ChannelCipher::Otp,
            CipherMode::Aes256Gcm => {
                ChannelCipher::Gcm(GcmChannel::single_key(self.params.gcm_rekey_after))
            }
        }
    }

    pub fn handle(&mut self, input: Input, ctx: &mut Ctx) {
        match input {
            Input::Start => ctx.after(Duration::ZERO, Timer::Heartbeat),
            Input::Timer(t) => self.on_timer(t, ctx),
            Input::Message(msg) => self.on_message(msg, ctx),
            Input::Undeliverable { msg, reason } => {
                // PEER_INIT and VALIDATE are retried on their own timers
                if !matches!(msg.body, Payload::PeerInit(_) | Payload::Validate(_)) {
                    self.fail(msg.correlation_id, reason, ctx);
                }
            }
            Input::Command(Command::InjectRngFailure) => self.rng.inject_source_failure(),
            Input::Command(Command::Probe { to, body }) => ctx.send(&to, NO_CORRELATION, body),
            _ => {}
        }
    }

    fn on_timer(&mut self, t: Timer, ctx: &mut Ctx) {
        match t {
            Timer::Heartbeat => {
                self.heartbeat_seq += 1;
                ctx.send(
                    &self.manager,
                    NO_CORRELATION,
                    Payload::Heartbeat(Heartbeat {
                        seq: self.heartbeat_seq,
                    }),
                );
                ctx.after(self.params.heartbeat_interval, Timer::Heartbeat);
            }
            Timer::AaaRetry { corr, attempt } => {
                let Some(s) = self.sessions.get(&corr) else {
                    return;
                };
                if s.state != SessionState::Validating || s.props.is_some() {
                    return;
                }
                if attempt >= self.params.retry_attempts {
                    self.fail(corr, ErrorCode::AaaTimeout, ctx);
                    return;
                }
                if let Some(e) = s.enriched.clone() {
                    ctx.send(&self.aaa, corr, Payload::Validate(e));
                }
                ctx.after(
                    self.backoff(attempt + 1),
                    Timer::AaaRetry {
                        corr,
                        attempt: attempt + 1,
                    },
                );
            }
            Timer::PeerRetry { corr, attempt } => {
                let Some(s) = self.sessions.get(&corr) else {
                    return;
                };
                if s.state != SessionState::Validating {
                    return;
                }
                if attempt >= self.params.retry_attempts {
                    self.fail(corr, ErrorCode::PeerUnreachable, ctx);
                    return;
                }
                if let (Some(peer), Some(init)) = (s.peer.clone(), s.peer_init.clone()) {
                    ctx.send(&peer, corr, Payload::PeerInit(init));
                }
                ctx.after(
                    self.backoff(attempt + 1),
                    Timer::PeerRetry {
                        corr,
                        attempt: attempt + 1,
                    },
                );
            }
            Timer::SessionDeadline { corr } if self.sessions.contains_key(&corr) => {
                self.fail(corr, ErrorCode::Timeout, ctx);
            }
            _ => {}
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        self.params.retry_base * 2u32.saturating_pow(attempt)
    }

    fn on_message(&mut self, msg: ProtocolMessage, ctx: &mut Ctx) {
        let corr = msg.correlation_id;
        let from = msg.from.clone();
        match msg.body {
            Payload::EnrichedRequest(e) if from == self.ukms => self.on_enriched(corr, e, ctx),
            Payload::ServiceProperties(p) if from == self.aaa => self.on_properties(corr, p, ctx),
            Payload::PeerInit(init) if from.kind() == EntityKind::Akms => {
                self.on_peer_init(from, corr, init, ctx)
            }
            Payload::PeerAck(_) if from.kind() == EntityKind::Akms => {
                self.on_peer_ack(&from, corr, ctx)
            }
            Payload::QbnRelay(QbnRelay::Arrived { key_id, material }) if from == self.ckms => {
                self.on_qbn_arrived(corr, key_id, material, ctx)
            }
            Payload::QbnAck(_) if from.kind() == EntityKind::Akms => {
                self.on_qbn_ack(&from, corr, ctx)
            }
            Payload::KsaTransfer(b) if from.kind() == EntityKind::Akms => {
                self.on_ksa_transfer(&from, corr, b, ctx)
            }
            Payload::KsaAck(_) if from == self.ukms || from.kind() == EntityKind::Akms => {
                self.on_ksa_ack(&from, corr, ctx)
            }
            Payload::Alarm(a) if from == self.ukms => {
                // the user tier has no channel to the manager
                let subject = Some(format!("{}: {}", from, a.subject.unwrap_or_default()));
                ctx.alarm(&self.manager, a.severity, a.kind, subject);
            }
            Payload::Error(e) => self.on_error(&from, corr, e, ctx),
            _ => {}
        }
    }

    fn set_state(&mut self, corr: CorrelationId, next: SessionState) -> bool {
        let Some(s) = self.sessions.get_mut(&corr) else {
            return false;
        };
        if !s.state.can_move_to(next) {
            self.stats.illegal_transitions += 1;
            return false;
        }
        s.state = next;
        true
    }

    fn mismatch(&mut self, corr: CorrelationId, ctx: &mut Ctx) {
        ctx.alarm(
            &self.manager,
            Severity::Warn,
            AlarmKind::CorrelationMismatch,
            Some(corr.to_string()),
        );
    }

    fn on_enriched(&mut self, corr: CorrelationId, e: EnrichedRequest, ctx: &mut Ctx) {
        if self.sessions.contains_key(&corr) || self.finished.contains_key(&corr) {
            return;
        }
        if self.sessions.len() >= self.params.max_sessions {
            ctx.error(&self.ukms, corr, ErrorCode::PeerBusy);
            return;
        }
        let mut s = Session::new(Role::Initiator, SessionState::Validating, e.inner.clone());
        s.account = Some(e.user_account.clone());
        s.enriched = Some(e.clone());
        self.sessions.insert(corr, s);
        ctx.send(&self.aaa, corr, Payload::Validate(e));
        ctx.after(self.backoff(0), Timer::AaaRetry { corr, attempt: 0 });
        ctx.after(self.params.session_timeout, Timer::SessionDeadline { corr });
    }

    fn on_properties(&mut self, corr: CorrelationId, p: ServiceProperties, ctx: &mut Ctx) {
        let ckms = self.ckms.clone();
        let Some(s) = self.sessions.get_mut(&corr) else {
            return;
        };
        if s.role != Role::Initiator || s.props.is_some() {
            return;
        }
        let init = PeerInit {
            number: s.req.number,
            size_bits: s.req.size_bits,
            master_sae: s.req.master_sae.clone(),
            slave_sae: s.req.slave_sae.clone(),
            remote_ukms: p.peer_ukms.clone(),
            sending_ckms: ckms,
        };
        let peer = p.peer_akms.clone();
        s.peer = Some(peer.clone());
        s.remote_ukms = Some(p.peer_ukms.clone());
        s.peer_init = Some(init.clone());
        s.props = Some(p);
        ctx.send(&peer, corr, Payload::PeerInit(init));
        ctx.after(self.backoff(0), Timer::PeerRetry { corr, attempt: 0 });
    }

    fn on_peer_init(&mut self, from: EntityId, corr: CorrelationId, init: PeerInit, ctx: &mut Ctx) {
        if let Some(s) = self.sessions.get(&corr) {
            if s.role == Role::Responder && s.peer.as_ref() == Some(&from) {
                let entry = self.ckms.clone();
                ctx.send(&from, corr, Payload::PeerAck(PeerAck { entry_ckms: entry }));
            }
            return;
        }
        if self.finished.contains_key(&corr) {
            return;
        }
        if init.remote_ukms != self.ukms {
            ctx.error(&from, corr, ErrorCode::UnknownSae);
            return;
        }
        if self.sessions.len() >= self.params.max_sessions {
            ctx.error(&from, corr, ErrorCode::PeerBusy);
            return;
        }
        let req = SaeRequest {
            master_sae: init.master_sae.clone(),
            slave_sae: init.slave_sae.clone(),
            number: init.number,
            size_bits: init.size_bits,
            correlation_id: corr,
        };
        let mut s = Session::new(Role::Responder, SessionState::Peered, req);
        s.peer = Some(from.clone());
        s.sending_ckms = Some(init.sending_ckms.clone());
        let qbn_bits = self.qbn_bits(&s.req);
        self.sessions.insert(corr, s);
        ctx.send(
            &from,
            corr,
            Payload::PeerAck(PeerAck {
                entry_ckms: self.ckms.clone(),
            }),
        );
        ctx.after(self.params.session_timeout, Timer::SessionDeadline { corr });

        let octets = self.generate(qbn_bits, ctx);
        let key_id = KeyId::random(&mut self.ids);
        ctx.observe(KeyRole::Qbn, key_id, &octets);
        let s = self.sessions.get_mut(&corr).expect("just inserted");
        s.qbn = Some(BitString::from_octets_with_len(octets.clone(), qbn_bits));
        ctx.send(
            &self.ckms,
            corr,
            Payload::QbnRelay(QbnRelay::Handoff {
                destination: init.sending_ckms,
                key_id,
                material: PlainMaterial {
                    len_bits: qbn_bits,
                    octets,
                },
            }),
        );
        self.set_state(corr, SessionState::QbnInFlight);
    }

    /// Draws from the hybrid generator, alarming once if its physical
    /// source has failed. Generation continues either way.
    fn generate(&mut self, bits: usize, ctx: &mut Ctx) -> Vec<u8> {
        let out = self.rng.generate(bits);
        if self.rng.health() == Health::Degraded && !self.rng_alarmed {
            self.rng_alarmed = true;
            ctx.send(
                &self.manager,
                NO_CORRELATION,
                Payload::Alarm(AlarmReport {
                    severity: Severity::Critical,
                    kind: AlarmKind::RngDegraded,
                    subject: Some(self.id.to_string()),
                }),
            );
        }
        out
    }

    fn on_peer_ack(&mut self, from: &EntityId, corr: CorrelationId, ctx: &mut Ctx) {
        let ok = self
            .sessions
            .get(&corr)
            .is_some_and(|s| s.role == Role::Initiator && s.peer.as_ref() == Some(from));
        if !ok {
            if !self.finished.contains_key(&corr) {
                self.mismatch(corr, ctx);
            }
            return;
        }
        if self.sessions[&corr].state == SessionState::Validating {
            self.set_state(corr, SessionState::Peered);
        }
    }

    fn on_qbn_arrived(
        &mut self,
        corr: CorrelationId,
        key_id: KeyId,
        material: PlainMaterial,
        ctx: &mut Ctx,
    ) {
        let expected = self.sessions.get(&corr).is_some_and(|s| {
            s.role == Role::Initiator
                && s.peer_init.is_some()
                && matches!(s.state, SessionState::Validating | SessionState::Peered)
        });
        if !expected {
            self.mismatch(corr, ctx);
            return;
        }
        ctx.observe(KeyRole::Qbn, key_id, &material.octets);
        let s = self.sessions.get_mut(&corr).expect("checked above");
        s.qbn = Some(BitString::from_octets_with_len(
            material.octets,
            material.len_bits,
        ));
        let peer = s.peer.clone().expect("peer set before PEER_INIT");
        // the QBN can only have been sent after our PEER_INIT was accepted
        self.set_state(corr, SessionState::Secured);
        ctx.send(&peer, corr, Payload::QbnAck(QbnAck { key_id }));
    }

    fn on_qbn_ack(&mut self, from: &EntityId, corr: CorrelationId, ctx: &mut Ctx) {
        let ok = self.sessions.get(&corr).is_some_and(|s| {
            s.role == Role::Responder
                && s.peer.as_ref() == Some(from)
                && s.state == SessionState::QbnInFlight
        });
        if !ok {
            self.mismatch(corr, ctx);
            return;
        }
        self.set_state(corr, SessionState::Secured);

        let (req, qbn) = {
            let s = &self.sessions[&corr];
            (
                s.req.clone(),
                s.qbn.clone().expect("responder generated the QBN"),
            )
        };
        let total = req.total_bits();
        if self.ukms_out.mode() == CipherMode::Otp
            && self
                .store
                .available_bits(&PoolKey::outbound(self.ukms.clone()))
                < ChannelCipher::cost_bits(CipherMode::Otp, total)
        {
            self.fail(corr, ErrorCode::KeyStarvation, ctx);
            return;
        }
        let ksa = self.generate(total, ctx);
        let key_ids: Vec<KeyId> = (0..req.number)
            .map(|_| KeyId::random(&mut self.ids))
            .collect();
        self.observe_ksa(&key_ids, &ksa, req.size_bits as usize, ctx);

        let peer = from.clone();
        let to_peer = match self.wrap_for_peer(&peer, &qbn, &ksa, total, ctx.now) {
            Ok(w) => w,
            Err(e) => {
                self.fail(corr, e.code(), ctx);
                return;
            }
        };
        let to_ukms = match self.wrap_for_ukms(&ksa, total, ctx.now) {
            Ok(w) => w,
            Err(_) => {
                self.fail(corr, ErrorCode::KeyStarvation, ctx);
                return;
            }
        };
        let bundle = |wrapped: WrappedKey| KsaBundle {
            master_sae: req.master_sae.clone(),
            slave_sae: req.slave_sae.clone(),
            key_ids: key_ids.clone(),
            size_bits: req.size_bits,
            wrapped,
        };
        ctx.send(&peer, corr, Payload::KsaTransfer(bundle(to_peer)));
        let ukms = self.ukms.clone();
        ctx.send(&ukms, corr, Payload::KsaPush(bundle(to_ukms)));
        let s = self.sessions.get_mut(&corr).expect("live session");
        s.ksa_ids = key_ids;
        s.qbn = None;
        self.set_state(corr, SessionState::KsaSent);
    }

    fn observe_ksa(&self, key_ids: &[KeyId], ksa: &[u8], size_bits: usize, ctx: &mut Ctx) {
        let step = size_bits / 8;
        for (i, id) in key_ids.iter().enumerate() {
            ctx.observe(KeyRole::Ksa, *id, &ksa[i * step..(i + 1) * step]);
        }
    }

    fn wrap_for_peer(
        &mut self,
        peer: &EntityId,
        qbn: &BitString,
        ksa: &[u8],
        bits: usize,
        now: SimTime,
    ) -> Result<WrappedKey, RelayError> {
        let mut cipher = self.peer_cipher();
        let mut src = SplitSource {
            pad: MemorySource::new(qbn.clone()),
            mac: self.bootstrap.source(PoolKey::outbound(peer.clone()), now),
        };
        let wrapped = cipher.wrap_bytes(ksa, bits, &mut src);
        let left = src.pad.available(KeyPurpose::Pad);
        self.qbn_consumed_bits += (qbn.len_bits() - left) as u64;
        wrapped
    }

    fn wrap_for_ukms(
        &mut self,
        ksa: &[u8],
        bits: usize,
        now: SimTime,
    ) -> Result<WrappedKey, RelayError> {
        let mut src = PoolHandle::new(&mut self.store, PoolKey::outbound(self.ukms.clone()), now);
        self.ukms_out.wrap_bytes(ksa, bits, &mut src)
    }

    fn on_ksa_transfer(
        &mut self,
        from: &EntityId,
        corr: CorrelationId,
        b: KsaBundle,
        ctx: &mut Ctx,
    ) {
        let ok = self.sessions.get(&corr).is_some_and(|s| {
            s.role == Role::Initiator
                && s.peer.as_ref() == Some(from)
                && s.state == SessionState::Secured
        });
        if !ok {
            self.mismatch(corr, ctx);
            return;
        }
        let qbn = self.sessions[&corr]
            .qbn
            .clone()
            .expect("secured sessions hold the QBN");
        let mut cipher = self.peer_cipher();
        let qbn_bits = qbn.len_bits();
        let mut src = SplitSource {
            pad: MemorySource::new(qbn),
            mac: self
                .bootstrap
                .source(PoolKey::inbound(from.clone()), ctx.now),
        };
        let unwrapped = cipher.unwrap(&b.wrapped, &mut src);
        self.qbn_consumed_bits += (qbn_bits - src.pad.available(KeyPurpose::Pad)) as u64;
        let ksa = match unwrapped {
            Ok(k) => k,
            Err(e) => {
                if e.code() == ErrorCode::AuthFail {
                    ctx.alarm(
                        &self.manager,
                        Severity::Critical,
                        AlarmKind::AuthFail,
                        Some(corr.to_string()),
                    );
                }
                self.fail(corr, e.code(), ctx);
                return;
            }
        };
        let bits = b.wrapped.len_bits as usize;
        self.observe_ksa(&b.key_ids, &ksa, b.size_bits as usize, ctx);
        let to_ukms = match self.wrap_for_ukms(&ksa, bits, ctx.now) {
            Ok(w) => w,
            Err(_) => {
                self.fail(corr, ErrorCode::KeyStarvation, ctx);
                return;
            }
        };
        let ukms = self.ukms.clone();
        let s = self.sessions.get_mut(&corr).expect("live session");
        s.ksa_ids = b.key_ids.clone();
        s.qbn = None;
        ctx.send(
            &ukms,
            corr,
            Payload::KsaPush(KsaBundle {
                wrapped: to_ukms,
                ..b
            }),
        );
        self.set_state(corr, SessionState::KsaSent);
    }

    fn on_ksa_ack(&mut self, from: &EntityId, corr: CorrelationId, ctx: &mut Ctx) {
        let Some(s) = self.sessions.get_mut(&corr) else {
            return;
        };
        if s.state != SessionState::KsaSent {
            return;
        }
        match s.role {
            Role::Responder => {
                if from != &self.ukms {
                    return;
                }
                let peer = s.peer.clone().expect("responder knows its peer");
                let ids = s.ksa_ids.clone();
                ctx.send(&peer, corr, Payload::KsaAck(KsaAck { key_ids: ids }));
                self.finish(corr, SessionState::Done);
            }
            Role::Initiator => {
                if from == &self.ukms {
                    s.ukms_acked = true;
                } else if s.peer.as_ref() == Some(from) {
                    s.peer_acked = true;
                }
                if s.ukms_acked && s.peer_acked {
                    let report = AccountingReport {
                        account_id: s.account.clone().unwrap_or_default(),
                        keys: s.req.number,
                        bits: s.req.total_bits() as u64,
                        outcome: ExchangeOutcome::Delivered,
                    };
                    ctx.send(&self.aaa, corr, Payload::Accounting(report));
                    self.finish(corr, SessionState::Done);
                }
            }
        }
    }

    fn on_error(&mut self, from: &EntityId, corr: CorrelationId, e: ErrorReport, ctx: &mut Ctx) {
        let Some(s) = self.sessions.get(&corr) else {
            return;
        };
        let role = s.role;
        if from == &self.aaa {
            if role == Role::Initiator && s.props.is_none() {
                // AAA keeps its own record of the rejection
                let ukms = self.ukms.clone();
                ctx.error(&ukms, corr, e.code);
                self.finish(corr, SessionState::Failed(e.code));
            }
            return;
        }
        if from == &self.ckms || s.peer.as_ref() == Some(from) || from == &self.ukms {
            self.fail_with(corr, e.code, ctx, from.kind() != EntityKind::Akms);
        }
    }

    fn fail(&mut self, corr: CorrelationId, code: ErrorCode, ctx: &mut Ctx) {
        self.fail_with(corr, code, ctx, true);
    }

    /// Fails a live session: tells the peer (when the failure is local), the
    /// user side, and accounting.
    fn fail_with(&mut self, corr: CorrelationId, code: ErrorCode, ctx: &mut Ctx, tell_peer: bool) {
        let Some(s) = self.sessions.get(&corr) else {
            return;
        };
        if tell_peer {
            if let Some(peer) = s.peer.clone() {
                if s.role == Role::Responder || s.peer_init.is_some() {
                    ctx.error(&peer, corr, code);
                }
            }
        }
        if s.role == Role::Initiator {
            let ukms = self.ukms.clone();
            ctx.error(&ukms, corr, code);
            if s.props.is_some() {
                let report = AccountingReport {
                    account_id: s.account.clone().unwrap_or_default(),
                    keys: s.req.number,
                    bits: 0,
                    outcome: ExchangeOutcome::Failed(code),
                };
                ctx.send(&self.aaa, corr, Payload::Accounting(report));
            }
        }
        self.finish(corr, SessionState::Failed(code));
    }

    fn finish(&mut self, corr: CorrelationId, state: SessionState) {
        if !self.set_state(corr, state) {
            return;
        }
        self.sessions.remove(&corr);
        self.finished.insert(corr, state);
        match state {
            SessionState::Done => self.stats.completed += 1,
            SessionState::Failed(code) => *self.stats.failed.entry(code.as_str()).or_default() += 1,
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::MsgId;

    fn params() -> AkmsParams {
        AkmsParams {
            retry_attempts: 3,
            retry_base: Duration::from_millis(200),
            session_timeout: Duration::from_secs(60),
            max_sessions: 2,
            heartbeat_interval: Duration::from_secs(30),
            access_cipher: CipherMode::Otp,
            peer_cipher: CipherMode::Otp,
            gcm_rekey_after: 1 << 20,
        }
    }

    fn akms(node: &str, seed: u64) -> Akms {
        Akms::new(
            EntityId::akms(node),
            EntityId::ukms(if node == "node-2" {
                "node-1"
            } else {
                "node-15"
            }),
            EntityId::ckms(node),
            EntityId::aaa("dc"),
            EntityId::manager("dc"),
            KeyStore::new(EntityId::akms(node), 1 << 20, 0),
            b"bootstrap-secret-for-tests".to_vec(),
            HybridRng::simulated(seed),
            seed,
            params(),
        )
    }

    fn corr() -> CorrelationId {
        CorrelationId::from_bytes([3; 16])
    }

    fn msg(from: EntityId, to: &EntityId, body: Payload) -> Input {
        Input::Message(ProtocolMessage::new(
            MsgId::NIL,
            corr(),
            from,
            to.clone(),
            body,
        ))
    }

    fn request() -> EnrichedRequest {
        EnrichedRequest {
            inner: SaeRequest {
                master_sae: EntityId::sae("sae-a"),
                slave_sae: EntityId::sae("sae-b"),
                number: 1,
                size_bits: 256,
                correlation_id: corr(),
            },
            user_account: "acct-1".into(),
            ukms_id: EntityId::ukms("node-1"),
        }
    }

    fn props() -> ServiceProperties {
        ServiceProperties {
            account_id: "acct-1".into(),
            max_keys_per_day: 1000,
            max_key_bits: 4096,
            keys_remaining_today: 999,
            peer_ukms: EntityId::ukms("node-15"),
            peer_akms: EntityId::akms("node-14"),
        }
    }

    fn step(a: &mut Akms, input: Input) -> Ctx {
        let mut ctx = Ctx::new(a.id.clone(), SimTime::ZERO);
        a.handle(input, &mut ctx);
        ctx
    }

    fn fill_ukms_pool(a: &mut Akms, bits: usize) {
        let pool = PoolKey::outbound(a.ukms.clone());
        for i in 0..bits / 256 {
            let mut id = [0xEE; 16];
            id[0] = i as u8;
            id[1] = a.id.name().len() as u8;
            let b = KeyBlock::with_id(
                KeyId::from_bytes(id),
                BitString::from_octets(vec![i as u8 ^ (a.id.name().len() as u8 * 17); 32]),
                KeyOrigin::QkdLink("1-2".into()),
                KeyRole::Kma,
                SimTime::ZERO,
            )
            .unwrap();
            a.store.refill(&pool, b).unwrap();
        }
    }

    fn body<'a>(ctx: &'a Ctx, to: &EntityId) -> &'a Payload {
        &ctx.out
            .iter()
            .find(|o| &o.to == to)
            .unwrap_or_else(|| panic!("nothing to {to}: {:?}", ctx.out))
            .body
    }

    /// Runs both AKMSs through a full exchange, standing in for the CKMS
    /// chain, AAA and both UKMSs.
    #[test]
    fn full_exchange_reaches_done_on_both_sides() {
        let (mut a, mut b) = (akms("node-2", 1), akms("node-14", 2));
        fill_ukms_pool(&mut a, 1024);
        fill_ukms_pool(&mut b, 1024);
        let (ida, idb) = (a.id.clone(), b.id.clone());

        let c = step(
            &mut a,
            msg(
                EntityId::ukms("node-1"),
                &ida,
                Payload::EnrichedRequest(request()),
            ),
        );
        assert!(matches!(
            body(&c, &EntityId::aaa("dc")),
            Payload::Validate(_)
        ));
        let c = step(
            &mut a,
            msg(
                EntityId::aaa("dc"),
                &ida,
                Payload::ServiceProperties(props()),
            ),
        );
        let init = body(&c, &idb).clone();
        let c = step(&mut b, msg(ida.clone(), &idb, init));
        assert!(matches!(body(&c, &ida), Payload::PeerAck(_)));
        let handoff = match body(&c, &EntityId::ckms("node-14")) {
            Payload::QbnRelay(QbnRelay::Handoff {
                destination,
                key_id,
                material,
            }) => {
                assert_eq!(destination, &EntityId::ckms("node-2"));
                (*key_id, material.clone())
            }
            other => panic!("{other:?}"),
        };
        assert_eq!(b.session_state(&corr()), Some(SessionState::QbnInFlight));
        step(
            &mut a,
            msg(
                idb.clone(),
                &ida,
                Payload::PeerAck(PeerAck {
                    entry_ckms: EntityId::ckms("node-14"),
                }),
            ),
        );
        assert_eq!(a.session_state(&corr()), Some(SessionState::Peered));

        let c = step(
            &mut a,
            msg(
                EntityId::ckms("node-2"),
                &ida,
                Payload::QbnRelay(QbnRelay::Arrived {
                    key_id: handoff.0,
                    material: handoff.1,
                }),
            ),
        );
        assert_eq!(a.session_state(&corr()), Some(SessionState::Secured));
        let ack = body(&c, &idb).clone();
        let c = step(&mut b, msg(ida.clone(), &idb, ack));
        let transfer = body(&c, &ida).clone();
        let push_b = match body(&c, &EntityId::ukms("node-15")) {
            Payload::KsaPush(p) => p.clone(),
            other => panic!("{other:?}"),
        };
        let ksa_b = c
            .observations
            .iter()
            .find(|o| o.role == KeyRole::Ksa)
            .unwrap()
            .octets
            .clone();

        let c = step(&mut a, msg(idb.clone(), &ida, transfer));
        let push_a = match body(&c, &EntityId::ukms("node-1")) {
            Payload::KsaPush(p) => p.clone(),
            other => panic!("{other:?}"),
        };
        let ksa_a = c
            .observations
            .iter()
            .find(|o| o.role == KeyRole::Ksa)
            .unwrap()
            .octets
            .clone();
        assert_eq!(ksa_a, ksa_b);
        assert_eq!(push_a.key_ids, push_b.key_ids);
        assert_ne!(push_a.wrapped.ciphertext, push_b.wrapped.ciphertext);

        let c = step(
            &mut b,
            msg(
                EntityId::ukms("node-15"),
                &idb,
                Payload::KsaAck(KsaAck {
                    key_ids: push_b.key_ids.clone(),
                }),
            ),
        );
        assert_eq!(b.session_state(&corr()), Some(SessionState::Done));
        let fwd = body(&c, &ida).clone();
        step(
            &mut a,
            msg(
                EntityId::ukms("node-1"),
                &ida,
                Payload::KsaAck(KsaAck {
                    key_ids: push_a.key_ids.clone(),
                }),
            ),
        );
        assert_eq!(a.session_state(&corr()), Some(SessionState::KsaSent));
        let c = step(&mut a, msg(idb.clone(), &ida, fwd));
        assert_eq!(a.session_state(&corr()), Some(SessionState::Done));
        assert!(matches!(
            body(&c, &EntityId::aaa("dc")),
            Payload::Accounting(AccountingReport {
                outcome: ExchangeOutcome::Delivered,
                keys: 1,
                bits: 256,
                ..
            })
        ));
        // AKMS leg: 256 pad bits from the QBN, 128 MAC bits from the bootstrap pool
        assert_eq!(a.bootstrap.store().total_consumed_bits(), 128);
        assert_eq!(b.bootstrap.store().total_consumed_bits(), 128);
        // UKMS legs: 384 bits each
        assert_eq!(a.store.total_consumed_bits(), 384);
        assert_eq!(b.store.total_consumed_bits(), 384);
    }

    #[test]
    fn aaa_silence_retries_then_times_out() {
        let mut a = akms("node-2", 1);
        let ida = a.id.clone();
        let c = step(
            &mut a,
            msg(
                EntityId::ukms("node-1"),
                &ida,
                Payload::EnrichedRequest(request()),
            ),
        );
        assert_eq!(
            c.timers[0],
            (
                Duration::from_millis(200),
                Timer::AaaRetry {
                    corr: corr(),
                    attempt: 0
                }
            )
        );
        let mut sends = 1;
        let mut delays = vec![];
        let mut t = Timer::AaaRetry {
            corr: corr(),
            attempt: 0,
        };
        loop {
            let c = step(&mut a, Input::Timer(t.clone()));
            sends += c
                .out
                .iter()
                .filter(|o| matches!(o.body, Payload::Validate(_)))
                .count();
            match c.timers.first() {
                Some((d, next)) => {
                    delays.push(d.as_millis());
                    t = next.clone();
                }
                None => {
                    assert!(
                        matches!(body(&c, &EntityId::ukms("node-1")), Payload::Error(e) if e.code == ErrorCode::AaaTimeout)
                    );
                    break;
                }
            }
        }
        assert_eq!(sends, 4);
        assert_eq!(delays, vec![400, 800, 1600]);
        assert_eq!(
            a.session_state(&corr()),
            Some(SessionState::Failed(ErrorCode::AaaTimeout))
        );
    }

    #[test]
    fn aaa_rejection_reaches_the_ukms_without_accounting() {
        let mut a = akms("node-2", 1);
        let ida = a.id.clone();
        step(
            &mut a,
            msg(
                EntityId::ukms("node-1"),
                &ida,
                Payload::EnrichedRequest(request()),
            ),
        );
        let c = step(
            &mut a,
            msg(
                EntityId::aaa("dc"),
                &ida,
                Payload::Error(ErrorReport::new(ErrorCode::PeerNotAllowed)),
            ),
        );
        assert_eq!(c.out.len(), 1);
        assert!(
            matches!(body(&c, &EntityId::ukms("node-1")), Payload::Error(e) if e.code == ErrorCode::PeerNotAllowed)
        );
    }

    #[test]
    fn responder_refuses_when_busy_and_reacks_duplicates() {
        let mut b = akms("node-14", 2);
        let idb = b.id.clone();
        let init = |n: u8| PeerInit {
            number: 1,
            size_bits: 256,
            master_sae: EntityId::sae("sae-a"),
            slave_sae: EntityId::sae("sae-b"),
            remote_ukms: EntityId::ukms("node-15"),
            sending_ckms: EntityId::ckms(&format!("node-{n}")),
        };
        let from = EntityId::akms("node-2");
        let send = |b: &mut Akms, c: u8| {
            let mut ctx = Ctx::new(idb.clone(), SimTime::ZERO);
            b.handle(
                Input::Message(ProtocolMessage::new(
                    MsgId::NIL,
                    CorrelationId::from_bytes([c; 16]),
                    from.clone(),
                    idb.clone(),
                    Payload::PeerInit(init(2)),
                )),
                &mut ctx,
            );
            ctx
        };
        send(&mut b, 1);
        let dup = send(&mut b, 1);
        assert_eq!(dup.out.len(), 1);
        assert!(matches!(dup.out[0].body, Payload::PeerAck(_)));
        send(&mut b, 2);
        let busy = send(&mut b, 3);
        assert!(matches!(&busy.out[0].body, Payload::Error(e) if e.code == ErrorCode::PeerBusy));
    }

    #[test]
    fn degraded_rng_alarms_once_and_keeps_generating() {
        let mut b = akms("node-14", 2);
        b.handle(
            Input::Command(Command::InjectRngFailure),
            &mut Ctx::new(b.id.clone(), SimTime::ZERO),
        );
        let mut alarms = 0;
        for c in 1..=2u8 {
            let mut ctx = Ctx::new(b.id.clone(), SimTime::ZERO);
            b.handle(
                Input::Message(ProtocolMessage::new(
                    MsgId::NIL,
                    CorrelationId::from_bytes([c; 16]),
                    EntityId::akms("node-2"),
                    b.id.clone(),
                    Payload::PeerInit(PeerInit {
                        number: 1,
                        size_bits: 256,
                        master_sae: EntityId::sae("sae-a"),
                        slave_sae: EntityId::sae("sae-b"),
                        remote_ukms: EntityId::ukms("node-15"),
                        sending_ckms: EntityId::ckms("node-2"),
                    }),
                )),
                &mut ctx,
            );
            alarms += ctx
                .out
                .iter()
                .filter(|o| {
                    matches!(
                        o.body,
                        Payload::Alarm(AlarmReport {
                            kind: AlarmKind::RngDegraded,
                            ..
                        })
                    )
                })
                .count();
            assert!(ctx
                .out
                .iter()
                .any(|o| matches!(o.body, Payload::QbnRelay(_))));
        }
        assert_eq!(alarms, 1);
    }

    #[test]
    fn stray_qbn_raises_correlation_mismatch() {
        let mut a = akms("node-2", 1);
        let ida = a.id.clone();
        let c = step(
            &mut a,
            msg(
                EntityId::ckms("node-2"),
                &ida,
                Payload::QbnRelay(QbnRelay::Arrived {
                    key_id: KeyId::from_bytes([1; 16]),
                    material: PlainMaterial {
                        len_bits: 8,
                        octets: vec![1],
                    },
                }),
            ),
        );
        assert!(matches!(
            body(&c, &EntityId::manager("dc")),
            Payload::Alarm(AlarmReport {
                kind: AlarmKind::CorrelationMismatch,
                ..
            })
        ));
    }

    #[test]
    fn empty_ukms_pool_fails_with_key_starvation() {
        let mut b = akms("node-14", 2);
        let idb = b.id.clone();
        let from = EntityId::akms("node-2");
        step(
            &mut b,
            msg(
                from.clone(),
                &idb,
                Payload::PeerInit(PeerInit {
                    number: 1,
                    size_bits: 256,
                    master_sae: EntityId::sae("sae-a"),
                    slave_sae: EntityId::sae("sae-b"),
                    remote_ukms: EntityId::ukms("node-15"),
                    sending_ckms: EntityId::ckms("node-2"),
                }),
            ),
        );
        let c = step(
            &mut b,
            msg(
                from.clone(),
                &idb,
                Payload::QbnAck(QbnAck { key_id: KeyId::NIL }),
            ),
        );
        assert!(matches!(body(&c, &from), Payload::Error(e) if e.code == ErrorCode::KeyStarvation));
        assert_eq!(
            b.session_state(&corr()),
            Some(SessionState::Failed(ErrorCode::KeyStarvation))
        );
    }

    #[test]
    fn transitions_never_leave_terminal_states() {
        use SessionState::*;
        let all = [
            Validating,
            Peered,
            QbnInFlight,
            Secured,
            KsaSent,
            Done,
            Failed(ErrorCode::Timeout),
        ];
        for from in all {
            for to in all {
                let ok = from.can_move_to(to);
                if from.is_terminal() {
                    assert!(!ok);
                } else if matches!(to, Failed(_)) {
                    assert!(ok);
                } else {
                    assert_eq!(ok, to.rank() > from.rank());
                }
            }
        }
    }

    #[test]
    fn bootstrap_streams_agree_between_ends() {
        let (a, b) = (EntityId::akms("node-2"), EntityId::akms("node-14"));
        let mut pa = PreShared::new(a.clone(), b"s".to_vec());
        let mut pb = PreShared::new(b.clone(), b"s".to_vec());
        let x = pa
            .source(PoolKey::outbound(b.clone()), SimTime::ZERO)
            .take(KeyPurpose::MacKey, 128)
            .unwrap();
        let y = pb
            .source(PoolKey::inbound(a.clone()), SimTime::ZERO)
            .take(KeyPurpose::MacKey, 128)
            .unwrap();
        assert_eq!(x, y);
        let z = pb
            .source(PoolKey::outbound(a), SimTime::ZERO)
            .take(KeyPurpose::MacKey, 128)
            .unwrap();
        assert_ne!(x, z);
    }
}
