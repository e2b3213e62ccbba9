//! Deterministic single-threaded backend. Every delivery, timer, link tick
//! and injected command is an event on one clock; ties break by insertion
//! order, so a run is a function of (deployment, seed).

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ChannelRegistry, MsgRecord, NotifyRecord, ObserveRecord, TraceRecord, TraceSink};
use crate::crypto_relay::{enforce_policy, PolicyDecision};
use crate::deploy::{derive_seed, Deployment, LinkBinding};
use crate::domain::{CorrelationId, EntityId, ErrorCode, MsgId, PoolKey, ProtocolMessage, SimTime};
use crate::engine::{ActorEvent, Command, Ctx, Input, Node, SaeNotify};
use crate::qkd_link_sim::{deliver_directed, deliver_to_kms, LinkStatus, Telemetry};

/// Size of the blocks used to pre-fill pools.
const PREFILL_CHUNK_BITS: usize = 1 << 16;

/// Delay of the out-of-band notify between SAEs.
const NOTIFY_LATENCY: Duration = Duration::from_millis(5);

#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
enum Event {
    Input(EntityId, Input),
    LinkTick,
    SetLink(String, bool),
}

/// Message counts by fate.
#[derive(Clone, Debug, Default, Serialize)]
pub struct FabricStats {
    pub sent: u64,
    pub delivered: u64,
    pub denied: BTreeMap<String, u64>,
    pub lost: BTreeMap<String, u64>,
}

#[derive(Debug)]
pub struct SimNet {
    now: SimTime,
    seq: u64,
    queue: BTreeMap<(SimTime, u64), Event>,
    nodes: BTreeMap<EntityId, Node>,
    channels: ChannelRegistry,
    links: Vec<LinkBinding>,
    link_tick: Duration,
    /// Last scheduled arrival per directed channel, for FIFO delivery.
    last_arrival: BTreeMap<(EntityId, EntityId), SimTime>,
    latency_rng: ChaCha8Rng,
    id_rng: ChaCha8Rng,
    muted: BTreeSet<EntityId>,
    trace: TraceSink,
    telemetry: Vec<Telemetry>,
    keep_telemetry: bool,
    api_events: Vec<ActorEvent>,
    stats: FabricStats,
    started: bool,
}

impl SimNet {
    pub fn new(dep: Deployment, seed: u64, link_tick: Duration, trace: TraceSink) -> Self {
        Self {
            now: SimTime::ZERO,
            seq: 0,
            queue: BTreeMap::new(),
            nodes: dep.nodes,
            channels: dep.channels,
            links: dep.links,
            link_tick,
            last_arrival: BTreeMap::new(),
            latency_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "fabric/latency")),
            id_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "fabric/ids")),
            muted: BTreeSet::new(),
            trace,
            telemetry: Vec::new(),
            keep_telemetry: true,
            api_events: Vec::new(),
            stats: FabricStats::default(),
            started: false,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn node(&self, id: &EntityId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &EntityId) -> Option<&mut Node> {
        self.nodes.get_mut(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn channels(&self) -> &ChannelRegistry {
        &self.channels
    }

    pub fn links(&self) -> &[LinkBinding] {
        &self.links
    }

    pub fn telemetry(&self) -> &[Telemetry] {
        &self.telemetry
    }

    pub fn set_keep_telemetry(&mut self, keep: bool) {
        self.keep_telemetry = keep;
    }

    pub fn stats(&self) -> &FabricStats {
        &self.stats
    }

    pub fn trace(&self) -> &TraceSink {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut TraceSink {
        &mut self.trace
    }

    pub fn take_api_events(&mut self) -> Vec<ActorEvent> {
        std::mem::take(&mut self.api_events)
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Fresh correlation id from the run's id stream.
    pub fn new_correlation(&mut self) -> CorrelationId {
        CorrelationId::random(&mut self.id_rng)
    }

    fn push(&mut self, at: SimTime, ev: Event) {
        self.queue.insert((at, self.seq), ev);
        self.seq += 1;
    }

    /// Boots every component and the link clock. Idempotent.
    pub fn start(&mut self) {
        if self.started {
            return;
        }
        self.started = true;
        let ids: Vec<EntityId> = self.nodes.keys().cloned().collect();
        for id in ids {
            self.dispatch(&id, Input::Start);
        }
        self.push(self.now + self.link_tick, Event::LinkTick);
    }

    pub fn command(&mut self, to: &EntityId, cmd: Command) {
        self.dispatch(to, Input::Command(cmd));
    }

    pub fn schedule_command(&mut self, at: SimTime, to: EntityId, cmd: Command) {
        self.push(at.max(self.now), Event::Input(to, Input::Command(cmd)));
    }

    /// Delivers an arbitrary input, e.g. a replayed message, at `at`.
    pub fn inject(&mut self, at: SimTime, to: EntityId, input: Input) {
        self.push(at.max(self.now), Event::Input(to, input));
    }

    /// Has the master SAE start one exchange now and returns its correlation.
    pub fn start_exchange(
        &mut self,
        master: &EntityId,
        slave: &EntityId,
        number: u32,
        size_bits: u32,
    ) -> CorrelationId {
        let corr = self.new_correlation();
        self.command(
            master,
            Command::StartExchange {
                corr,
                slave: slave.clone(),
                number,
                size_bits,
            },
        );
        corr
    }

    /// An unresponsive component silently drops whatever reaches it.
    pub fn mute(&mut self, id: &EntityId, muted: bool) {
        if muted {
            self.muted.insert(id.clone());
        } else {
            self.muted.remove(id);
        }
    }

    pub fn schedule_link_state(&mut self, at: SimTime, link_id: &str, up: bool) {
        self.push(at.max(self.now), Event::SetLink(link_id.to_string(), up));
    }

    /// Takes a QKD link and its classical channel up or down and tells both
    /// KMSs. Returns false for an unknown link.
    pub fn set_link_state(&mut self, link_id: &str, up: bool) -> bool {
        let Some(b) = self.links.iter_mut().find(|b| b.link.link_id() == link_id) else {
            return false;
        };
        let state = if up { LinkStatus::Up } else { LinkStatus::Down };
        if !b.link.set_state(state) {
            return true;
        }
        let (a, z) = (b.kms_a.clone(), b.kms_b.clone());
        self.channels.set_up(&a, &z, up);
        for (me, peer) in [(&a, &z), (&z, &a)] {
            self.dispatch(
                me,
                Input::LinkState {
                    link_id: link_id.to_string(),
                    peer: peer.clone(),
                    up,
                },
            );
        }
        true
    }

    /// Loads `bits` of fresh link material into each direction of every
    /// link, standing in for fully populated key stores.
    pub fn prefill(&mut self, bits: usize) {
        for i in 0..self.links.len() {
            let now = self.now;
            let (a, z) = (self.links[i].kms_a.clone(), self.links[i].kms_b.clone());
            let forward = self.links[i].link.prefill(bits, PREFILL_CHUNK_BITS, now);
            let backward = self.links[i].link.prefill(bits, PREFILL_CHUNK_BITS, now);
            let (Some(mut na), Some(mut nz)) = (self.nodes.remove(&a), self.nodes.remove(&z))
            else {
                continue;
            };
            if let (Some(sa), Some(sz)) = (na.store_mut(), nz.store_mut()) {
                deliver_directed(
                    sa,
                    &PoolKey::outbound(z.clone()),
                    sz,
                    &PoolKey::inbound(a.clone()),
                    forward,
                );
                deliver_directed(
                    sz,
                    &PoolKey::outbound(a.clone()),
                    sa,
                    &PoolKey::inbound(z.clone()),
                    backward,
                );
            }
            self.nodes.insert(a, na);
            self.nodes.insert(z, nz);
        }
    }

    /// Runs every event due up to and including `now + dt`, then sets the
    /// clock there. Returns the number of events processed.
    pub fn advance_clock(&mut self, dt: Duration) -> usize {
        let until = self.now + dt;
        let n = self.run_until(until);
        self.now = until;
        n
    }

    pub fn run_until(&mut self, until: SimTime) -> usize {
        let mut n = 0;
        while self
            .queue
            .first_key_value()
            .is_some_and(|(k, _)| k.0 <= until)
        {
            self.step();
            n += 1;
        }
        n
    }

    /// Runs events until `done` holds or the clock would pass `limit`.
    /// Returns whether `done` was reached.
    pub fn run_while_pending(
        &mut self,
        limit: SimTime,
        mut done: impl FnMut(&SimNet) -> bool,
    ) -> bool {
        loop {
            if done(self) {
                return true;
            }
            match self.queue.first_key_value() {
                Some((k, _)) if k.0 <= limit => {
                    self.step();
                }
                _ => return false,
            }
        }
    }

    /// Processes the next event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(((t, _), ev)) = self.queue.pop_first() else {
            return false;
        };
        self.now = self.now.max(t);
        match ev {
            Event::Input(to, input) => self.dispatch(&to, input),
            Event::LinkTick => {
                self.tick_links();
                self.push(self.now + self.link_tick, Event::LinkTick);
            }
            Event::SetLink(id, up) => {
                self.set_link_state(&id, up);
            }
        }
        true
    }

    fn tick_links(&mut self) {
        let dt = self.link_tick;
        for i in 0..self.links.len() {
            let now = self.now;
            let out = self.links[i].link.tick(now, dt);
            if self.keep_telemetry {
                self.telemetry.push(out.telemetry);
            }
            if out.a_blocks.is_empty() {
                continue;
            }
            let (a, z) = (self.links[i].kms_a.clone(), self.links[i].kms_b.clone());
            let (Some(mut na), Some(mut nz)) = (self.nodes.remove(&a), self.nodes.remove(&z))
            else {
                continue;
            };
            let stats = match (na.store_mut(), nz.store_mut()) {
                (Some(sa), Some(sz)) => deliver_to_kms(&a, sa, &z, sz, out.a_blocks),
                _ => Default::default(),
            };
            self.nodes.insert(a.clone(), na);
            self.nodes.insert(z.clone(), nz);
            if stats.stored_blocks > 0 {
                self.dispatch(&a, Input::KeysRefilled { peer: z.clone() });
                self.dispatch(&z, Input::KeysRefilled { peer: a });
            }
        }
    }

    fn dispatch(&mut self, to: &EntityId, input: Input) {
        let Some(node) = self.nodes.get_mut(to) else {
            return;
        };
        let mut ctx = Ctx::new(to.clone(), self.now);
        node.handle(input, &mut ctx);
        self.apply(ctx);
    }

    fn apply(&mut self, ctx: Ctx) {
        let t = self.now.as_micros();
        let tracing = self.trace.enabled();
        if tracing {
            for o in &ctx.observations {
                self.trace.record(&TraceRecord::Observe(ObserveRecord {
                    t,
                    holder: ctx.me.clone(),
                    role: o.role,
                    key_id: o.key_id,
                    hex: hex::encode(&o.octets),
                }));
            }
        }
        for (delay, timer) in ctx.timers {
            self.push(
                self.now + delay,
                Event::Input(ctx.me.clone(), Input::Timer(timer)),
            );
        }
        for out in ctx.out {
            let msg = ProtocolMessage::new(
                MsgId::random(&mut self.id_rng),
                out.corr,
                ctx.me.clone(),
                out.to,
                out.body,
            );
            self.send(msg);
        }
        for n in ctx.notifies {
            self.notify(n);
        }
        self.api_events.extend(ctx.events);
    }

    fn notify(&mut self, n: SaeNotify) {
        if self.trace.enabled() {
            self.trace.record(&TraceRecord::Notify(NotifyRecord {
                t: self.now.as_micros(),
                corr: n.corr,
                from: n.master.clone(),
                to: n.slave.clone(),
                key_ids: n.key_ids.clone(),
            }));
        }
        let to = n.slave.clone();
        self.push(
            self.now + NOTIFY_LATENCY,
            Event::Input(to, Input::Command(Command::Notify(n))),
        );
    }

    fn send(&mut self, msg: ProtocolMessage) {
        self.stats.sent += 1;
        let chan = self.channels.lookup(&msg.from, &msg.to);
        let chan_id = chan.map(|c| c.id.clone());
        let fate = match enforce_policy(&msg, chan) {
            PolicyDecision::Deny(reason) => Err((
                format!("deny:{}", reason.as_str()),
                Some(ErrorCode::PolicyDeny),
            )),
            PolicyDecision::Allow => {
                let c = chan.expect("allowed messages have a channel");
                if !c.up {
                    Err((
                        "lost:CHANNEL_DOWN".to_string(),
                        Some(ErrorCode::ChannelDown),
                    ))
                } else if self.muted.contains(&msg.to) {
                    Err(("lost:UNRESPONSIVE".to_string(), None))
                } else {
                    Ok(c.latency.sample(&mut self.latency_rng))
                }
            }
        };
        if self.trace.enabled() {
            let outcome = match &fate {
                Ok(_) => "delivered".to_string(),
                Err((o, _)) => o.clone(),
            };
            let rec = MsgRecord::new(self.now.as_micros(), &msg, chan_id.as_deref(), outcome);
            self.trace.record(&TraceRecord::Msg(rec));
        }
        match fate {
            Ok(latency) => {
                self.stats.delivered += 1;
                let key = (msg.from.clone(), msg.to.clone());
                let at = (self.now + latency).max(
                    self.last_arrival
                        .get(&key)
                        .copied()
                        .unwrap_or(SimTime::ZERO),
                );
                self.last_arrival.insert(key, at);
                let to = msg.to.clone();
                self.push(at, Event::Input(to, Input::Message(msg)));
            }
            Err((outcome, code)) => {
                let bucket = if outcome.starts_with("deny:") {
                    &mut self.stats.denied
                } else {
                    &mut self.stats.lost
                };
                *bucket.entry(outcome).or_default() += 1;
                if let Some(reason) = code {
                    let from = msg.from.clone();
                    self.push(
                        self.now,
                        Event::Input(from, Input::Undeliverable { msg, reason }),
                    );
                }
            }
        }
    }
}
