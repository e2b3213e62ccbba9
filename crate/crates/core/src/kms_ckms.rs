//! Carrier KMS: relays QBN keys hop by hop along controller-installed
//! routes, re-encrypting on every link.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use crate::crypto_relay::{ChannelCipher, CipherMode, GcmChannel, PoolHandle, RelayError};
use crate::domain::{
    AlarmKind, CorrelationId, EntityId, ErrorCode, Heartbeat, KeyId, KeyStore, LinkId, LinkReport,
    NextHop, Payload, PlainMaterial, PoolKey, ProtocolMessage, QbnRelay, RelayFrame, RouteAck,
    RouteRequest, RouteResult, RouteUpdate, Severity, SimTime, StatusUpdate,
};
use crate::engine::{Ctx, Input, Timer, NO_CORRELATION};

#[derive(Clone, Copy, Debug)]
pub struct CkmsParams {
    pub max_hops: u32,
    pub key_wait: Duration,
    pub status_interval: Duration,
    pub cipher: CipherMode,
    pub gcm_rekey_after: u64,
}

#[derive(Debug)]
struct Neighbor {
    link_id: LinkId,
    up: bool,
    out: ChannelCipher,
    inbound: ChannelCipher,
    /// Refilled bits over both pools at the previous status push.
    last_total: u64,
}

/// A QBN key held in the clear between unwrap and re-wrap.
#[derive(Clone, Debug)]
struct Frame {
    corr: CorrelationId,
    destination: EntityId,
    key_id: KeyId,
    material: PlainMaterial,
    hop_count: u32,
}

#[derive(Debug)]
pub struct Ckms {
    id: EntityId,
    akms: Option<EntityId>,
    controller: EntityId,
    manager: EntityId,
    store: KeyStore,
    params: CkmsParams,
    neighbors: BTreeMap<EntityId, Neighbor>,
    routes: BTreeMap<EntityId, NextHop>,
    version: u64,
    awaiting_route: BTreeMap<EntityId, Vec<Frame>>,
    route_requested: BTreeSet<EntityId>,
    stalled: BTreeMap<EntityId, VecDeque<Frame>>,
    came_from: BTreeMap<CorrelationId, EntityId>,
    last_push: Option<SimTime>,
    heartbeat_seq: u64,
    relayed: u64,
}

impl Ckms {
    /// `neighbors` lists (link id, adjacent CKMS, initially up).
    pub fn new(
        id: EntityId,
        akms: Option<EntityId>,
        controller: EntityId,
        manager: EntityId,
        store: KeyStore,
        neighbors: Vec<(LinkId, EntityId, bool)>,
        params: CkmsParams,
    ) -> Self {
        let cipher = |p: &CkmsParams| match p.cipher {
            CipherMode::Otp => ChannelCipher::Otp,
            CipherMode::Aes256Gcm => ChannelCipher::Gcm(GcmChannel::new(p.gcm_rekey_after)),
        };
        let neighbors = neighbors
            .into_iter()
            .map(|(link_id, peer, up)| {
                (
                    peer,
                    Neighbor {
                        link_id,
                        up,
                        out: cipher(&params),
                        inbound: cipher(&params),
                        last_total: 0,
                    },
                )
            })
            .collect();
        Self {
            id,
            akms,
            controller,
            manager,
            store,
            params,
            neighbors,
            routes: BTreeMap::new(),
            version: 0,
            awaiting_route: BTreeMap::new(),
            route_requested: BTreeSet::new(),
            stalled: BTreeMap::new(),
            came_from: BTreeMap::new(),
            last_push: None,
            heartbeat_seq: 0,
            relayed: 0,
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

    pub fn route(&self, destination: &EntityId) -> Option<&NextHop> {
        self.routes.get(destination)
    }

    pub fn table_version(&self) -> u64 {
        self.version
    }

    /// Frames forwarded or delivered locally so far.
    pub fn relayed(&self) -> u64 {
        self.relayed
    }

    pub fn stalled_frames(&self) -> usize {
        self.stalled.values().map(VecDeque::len).sum()
    }

    pub fn handle(&mut self, input: Input, ctx: &mut Ctx) {
        match input {
            Input::Start => {
                ctx.after(Duration::ZERO, Timer::StatusPush);
                ctx.after(Duration::ZERO, Timer::Heartbeat);
            }
            Input::Timer(Timer::StatusPush) => {
                self.push_status(ctx);
                ctx.after(self.params.status_interval, Timer::StatusPush);
            }
            Input::Timer(Timer::Heartbeat) => {
                self.heartbeat_seq += 1;
                ctx.send(
                    &self.manager,
                    NO_CORRELATION,
                    Payload::Heartbeat(Heartbeat {
                        seq: self.heartbeat_seq,
                    }),
                );
                ctx.after(self.params.status_interval, Timer::Heartbeat);
            }
            Input::Timer(Timer::KeyWait { corr }) => self.key_wait_expired(corr, ctx),
            Input::KeysRefilled { peer } => self.drain(&peer, ctx),
            Input::LinkState { peer, up, .. } => self.link_state(peer, up, ctx),
            Input::Message(msg) => self.on_message(msg, ctx),
            Input::Undeliverable { msg, reason } => {
                if let Payload::QbnRelay(QbnRelay::Hop(_) | QbnRelay::Arrived { .. }) = msg.body {
                    self.nack(msg.correlation_id, reason, ctx);
                }
            }
            _ => {}
        }
    }

    fn on_message(&mut self, msg: ProtocolMessage, ctx: &mut Ctx) {
        let corr = msg.correlation_id;
        match msg.body {
            Payload::QbnRelay(QbnRelay::Handoff {
                destination,
                key_id,
                material,
            }) if Some(&msg.from) == self.akms.as_ref() => {
                self.came_from.insert(corr, msg.from.clone());
                self.forward(
                    Frame {
                        corr,
                        destination,
                        key_id,
                        material,
                        hop_count: 0,
                    },
                    ctx,
                );
            }
            Payload::QbnRelay(QbnRelay::Hop(frame)) if self.neighbors.contains_key(&msg.from) => {
                self.on_hop(msg.from, corr, frame, ctx);
            }
            Payload::RouteUpdate(u) if msg.from == self.controller => {
                self.route_update(u, corr, ctx)
            }
            Payload::RouteAck(a) if msg.from == self.controller => self.route_ack(a, ctx),
            Payload::Error(e) => {
                // NACK from downstream travels back towards the entry node
                self.nack(corr, e.code, ctx);
            }
            _ => {}
        }
    }

    fn on_hop(&mut self, from: EntityId, corr: CorrelationId, frame: RelayFrame, ctx: &mut Ctx) {
        self.came_from.insert(corr, from.clone());
        let hop_count = frame.hop_count + 1;
        if hop_count > self.params.max_hops {
            ctx.alarm(
                &self.manager,
                Severity::Warn,
                AlarmKind::HopLimit,
                Some(corr.to_string()),
            );
            self.nack(corr, ErrorCode::HopLimit, ctx);
            return;
        }
        let Some(n) = self.neighbors.get_mut(&from) else {
            return;
        };
        let mut src = PoolHandle::new(&mut self.store, PoolKey::inbound(from.clone()), ctx.now);
        match n.inbound.unwrap(&frame.wrapped, &mut src) {
            Ok(octets) => self.forward(
                Frame {
                    corr,
                    destination: frame.destination,
                    key_id: frame.key_id,
                    material: PlainMaterial {
                        len_bits: frame.wrapped.len_bits as usize,
                        octets,
                    },
                    hop_count,
                },
                ctx,
            ),
            Err(e) => {
                if e.code() == ErrorCode::AuthFail {
                    ctx.alarm(
                        &self.manager,
                        Severity::Critical,
                        AlarmKind::AuthFail,
                        Some(n.link_id.clone()),
                    );
                }
                self.nack(corr, e.code(), ctx);
            }
        }
    }

    fn forward(&mut self, frame: Frame, ctx: &mut Ctx) {
        if frame.destination == self.id {
            let Some(akms) = self.akms.clone() else {
                self.nack(frame.corr, ErrorCode::NoRoute, ctx);
                return;
            };
            self.relayed += 1;
            ctx.send(
                &akms,
                frame.corr,
                Payload::QbnRelay(QbnRelay::Arrived {
                    key_id: frame.key_id,
                    material: frame.material,
                }),
            );
            return;
        }
        let next = match self.routes.get(&frame.destination) {
            Some(NextHop::Via(next)) if self.neighbors.get(next).is_some_and(|n| n.up) => {
                next.clone()
            }
            _ => {
                self.await_route(frame, ctx);
                return;
            }
        };
        let queue = self.stalled.entry(next.clone()).or_default();
        if !queue.is_empty() {
            queue.push_back(frame);
            return;
        }
        if let Some(frame) = self.try_send(&next, frame, ctx) {
            ctx.after(self.params.key_wait, Timer::KeyWait { corr: frame.corr });
            self.stalled.entry(next).or_default().push_back(frame);
        }
    }

    /// Wraps and sends; hands the frame back if the pool is short.
    fn try_send(&mut self, next: &EntityId, frame: Frame, ctx: &mut Ctx) -> Option<Frame> {
        let n = self
            .neighbors
            .get_mut(next)
            .expect("routes only name neighbors");
        let mut src = PoolHandle::new(&mut self.store, PoolKey::outbound(next.clone()), ctx.now);
        match n
            .out
            .wrap_bytes(&frame.material.octets, frame.material.len_bits, &mut src)
        {
            Ok(wrapped) => {
                self.relayed += 1;
                ctx.send(
                    next,
                    frame.corr,
                    Payload::QbnRelay(QbnRelay::Hop(RelayFrame {
                        destination: frame.destination,
                        key_id: frame.key_id,
                        hop_count: frame.hop_count,
                        wrapped,
                    })),
                );
                None
            }
            Err(RelayError::InsufficientKey { .. }) => Some(frame),
            Err(e) => {
                self.nack(frame.corr, e.code(), ctx);
                None
            }
        }
    }

    fn await_route(&mut self, frame: Frame, ctx: &mut Ctx) {
        let dst = frame.destination.clone();
        let corr = frame.corr;
        self.awaiting_route
            .entry(dst.clone())
            .or_default()
            .push(frame);
        if self.route_requested.insert(dst.clone()) {
            ctx.send(
                &self.controller,
                corr,
                Payload::RouteRequest(RouteRequest { destination: dst }),
            );
        }
    }

    /// Sends stalled frames for `peer` in order until one does not fit.
    fn drain(&mut self, peer: &EntityId, ctx: &mut Ctx) {
        let Some(mut queue) = self.stalled.remove(peer) else {
            return;
        };
        if !self.neighbors.get(peer).is_some_and(|n| n.up) {
            self.stalled.insert(peer.clone(), queue);
            return;
        }
        while let Some(frame) = queue.pop_front() {
            if let Some(frame) = self.try_send(peer, frame, ctx) {
                queue.push_front(frame);
                break;
            }
        }
        if !queue.is_empty() {
            self.stalled.insert(peer.clone(), queue);
        }
    }

    fn key_wait_expired(&mut self, corr: CorrelationId, ctx: &mut Ctx) {
        let Some(peer) = self
            .stalled
            .iter()
            .find(|(_, q)| q.iter().any(|f| f.corr == corr))
            .map(|(p, _)| p.clone())
        else {
            return;
        };
        if let Some(q) = self.stalled.get_mut(&peer) {
            q.retain(|f| f.corr != corr);
        }
        self.nack(corr, ErrorCode::InsufficientKey, ctx);
        self.drain(&peer, ctx);
    }

    fn nack(&mut self, corr: CorrelationId, code: ErrorCode, ctx: &mut Ctx) {
        if let Some(up) = self.came_from.remove(&corr) {
            ctx.error(&up, corr, code);
        }
    }

    fn route_update(&mut self, u: RouteUpdate, corr: CorrelationId, ctx: &mut Ctx) {
        let result = match &u.entry {
            Some(NextHop::Via(next)) if !self.neighbors.contains_key(next) => RouteResult::Failed {
                code: ErrorCode::NoRoute,
            },
            entry => {
                match entry {
                    Some(e) => self.routes.insert(u.destination.clone(), e.clone()),
                    None => self.routes.remove(&u.destination),
                };
                self.version += 1;
                RouteResult::Installed {
                    version: self.version,
                }
            }
        };
        ctx.send(
            &self.controller,
            corr,
            Payload::RouteAck(RouteAck {
                install_id: u.install_id,
                destination: u.destination,
                result,
            }),
        );
    }

    fn route_ack(&mut self, a: RouteAck, ctx: &mut Ctx) {
        self.route_requested.remove(&a.destination);
        let frames = self
            .awaiting_route
            .remove(&a.destination)
            .unwrap_or_default();
        match a.result {
            RouteResult::Installed { .. } => {
                // a frame that still finds no usable route asks again
                for f in frames {
                    self.forward(f, ctx);
                }
            }
            RouteResult::Failed { .. } => {
                for f in frames {
                    self.nack(f.corr, ErrorCode::NoPath, ctx);
                }
            }
        }
    }

    fn link_state(&mut self, peer: EntityId, up: bool, ctx: &mut Ctx) {
        let Some(n) = self.neighbors.get_mut(&peer) else {
            return;
        };
        if n.up == up {
            return;
        }
        n.up = up;
        let (severity, kind) = if up {
            (Severity::Warn, AlarmKind::LinkUp)
        } else {
            (Severity::Critical, AlarmKind::LinkDown)
        };
        let subject = Some(n.link_id.to_string());
        let manager = self.manager.clone();
        ctx.alarm(&manager, severity, kind, subject);
        if !up {
            self.routes
                .retain(|_, hop| hop != &NextHop::Via(peer.clone()));
            if let Some(q) = self.stalled.remove(&peer) {
                for f in q {
                    self.await_route(f, ctx);
                }
            }
        } else {
            self.drain(&peer, ctx);
        }
        self.push_status(ctx);
    }

    fn push_status(&mut self, ctx: &mut Ctx) {
        let elapsed = self
            .last_push
            .map(|t| ctx.now.saturating_since(t).as_secs_f64())
            .unwrap_or(0.0);
        self.last_push = Some(ctx.now);
        let mut links = Vec::with_capacity(self.neighbors.len());
        for (peer, n) in self.neighbors.iter_mut() {
            let out = PoolKey::outbound(peer.clone());
            let total = self.store.stats(&out).refilled_bits
                + self
                    .store
                    .stats(&PoolKey::inbound(peer.clone()))
                    .refilled_bits;
            let rate = if elapsed > 0.0 {
                total.saturating_sub(n.last_total) as f64 / elapsed
            } else {
                0.0
            };
            n.last_total = total;
            links.push(LinkReport {
                link_id: n.link_id.clone(),
                peer: peer.clone(),
                available_bits: self.store.available_bits(&out) as u64,
                refill_rate_bps: rate,
                up: n.up,
            });
        }
        ctx.send(
            &self.controller,
            NO_CORRELATION,
            Payload::StatusUpdate(StatusUpdate { links }),
        );
    }
}
