//! Centralized QKDN controller: link-state telemetry, weight-optimal path
//! computation and sequential routing-table installation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::time::Duration;

use serde::Serialize;

use crate::config::ControllerParams;
use crate::domain::{
    AlarmKind, AlarmReport, CorrelationId, EntityId, ErrorCode, Heartbeat, LinkId, LinkReport,
    NextHop, Payload, ProtocolMessage, RouteAck, RouteRequest, RouteResult, RouteUpdate, Severity,
    SimTime,
};
use crate::engine::{Ctx, Input, Timer, NO_CORRELATION};

/// Directed weighted graph over CKMS ids.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    adj: BTreeMap<EntityId, BTreeMap<EntityId, f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_edge(&mut self, u: EntityId, v: EntityId, w: f64) {
        assert!(w > 0.0, "edge weights must be positive");
        self.adj.entry(v.clone()).or_default();
        self.adj.entry(u).or_default().insert(v, w);
    }

    pub fn add_undirected(&mut self, u: EntityId, v: EntityId, w: f64) {
        self.add_edge(u.clone(), v.clone(), w);
        self.add_edge(v, u, w);
    }

    pub fn neighbors(&self, u: &EntityId) -> impl Iterator<Item = (&EntityId, f64)> {
        self.adj.get(u).into_iter().flatten().map(|(v, w)| (v, *w))
    }

    pub fn scaled(&self, k: f64) -> Graph {
        Graph {
            adj: self
                .adj
                .iter()
                .map(|(u, m)| {
                    (
                        u.clone(),
                        m.iter().map(|(v, w)| (v.clone(), w * k)).collect(),
                    )
                })
                .collect(),
        }
    }
}

/// Path ordering: lower total weight first, then the lexicographically
/// smallest node sequence.
fn better(a: (f64, &[EntityId]), b: (f64, &[EntityId])) -> bool {
    match a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => a.1 < b.1,
    }
}

#[derive(PartialEq)]
struct Label {
    dist: f64,
    path: Vec<EntityId>,
}

impl Eq for Label {}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed for the max-heap
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.path.cmp(&self.path))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-weight simple path, ties broken by smallest node sequence.
/// Weights are summed in path order.
pub fn shortest_path(g: &Graph, src: &EntityId, dst: &EntityId) -> Option<(Vec<EntityId>, f64)> {
    let mut best: BTreeMap<EntityId, (f64, Vec<EntityId>)> = BTreeMap::new();
    let mut done: BTreeSet<EntityId> = BTreeSet::new();
    let mut heap = BinaryHeap::new();
    best.insert(src.clone(), (0.0, vec![src.clone()]));
    heap.push(Label {
        dist: 0.0,
        path: vec![src.clone()],
    });
    while let Some(Label { dist, path }) = heap.pop() {
        let u = path.last().expect("labels are non-empty").clone();
        if !done.insert(u.clone()) {
            continue;
        }
        if &u == dst {
            return Some((path, dist));
        }
        for (v, w) in g.neighbors(&u) {
            if done.contains(v) {
                continue;
            }
            let nd = dist + w;
            let mut np = path.clone();
            np.push(v.clone());
            let improves = best
                .get(v)
                .is_none_or(|(bd, bp)| better((nd, &np), (*bd, bp)));
            if improves {
                best.insert(v.clone(), (nd, np.clone()));
                heap.push(Label { dist: nd, path: np });
            }
        }
    }
    None
}

/// Enumerates every simple path; used as an oracle for [`shortest_path`].
pub fn brute_force_path(g: &Graph, src: &EntityId, dst: &EntityId) -> Option<(Vec<EntityId>, f64)> {
    fn walk(
        g: &Graph,
        dst: &EntityId,
        path: &mut Vec<EntityId>,
        dist: f64,
        best: &mut Option<(Vec<EntityId>, f64)>,
    ) {
        let u = path.last().expect("non-empty").clone();
        if &u == dst {
            if best
                .as_ref()
                .is_none_or(|(bp, bd)| better((dist, path), (*bd, bp)))
            {
                *best = Some((path.clone(), dist));
            }
            return;
        }
        for (v, w) in g.neighbors(&u) {
            if path.contains(v) {
                continue;
            }
            path.push(v.clone());
            walk(g, dst, path, dist + w, best);
            path.pop();
        }
    }
    let mut best = None;
    walk(g, dst, &mut vec![src.clone()], 0.0, &mut best);
    best
}

/// What the controller last heard from one end of a link.
#[derive(Clone, Debug, Serialize)]
pub struct DirectedState {
    pub available_bits: u64,
    pub refill_rate_bps: f64,
    pub up: bool,
    pub last_update: SimTime,
}

#[derive(Clone, Debug)]
struct LinkEntry {
    a: EntityId,
    b: EntityId,
    admin_up: bool,
    /// Keyed by the reporting end.
    reports: BTreeMap<EntityId, DirectedState>,
}

/// Read-only view of one link for monitoring.
#[derive(Clone, Debug, Serialize)]
pub struct LinkStateView {
    pub link_id: LinkId,
    pub endpoints: (EntityId, EntityId),
    pub available_bits: u64,
    pub refill_rate_bps: f64,
    pub admin_state: &'static str,
    pub up: bool,
    pub last_update: Option<SimTime>,
    pub weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathComputation {
    pub src: EntityId,
    pub dst: EntityId,
    pub path: Vec<EntityId>,
    pub total_weight: f64,
    pub computed_at: SimTime,
}

#[derive(Clone, Debug)]
struct Install {
    id: u64,
    initiator: EntityId,
    corr: CorrelationId,
    destination: EntityId,
    path: Vec<EntityId>,
    step: usize,
    /// Entries this install replaced, for rollback.
    previous: Vec<Option<NextHop>>,
    /// Table version reported by the initiator.
    version: Option<u64>,
}

impl Install {
    fn entry(&self, i: usize) -> NextHop {
        match self.path.get(i + 1) {
            Some(next) => NextHop::Via(next.clone()),
            None => NextHop::Local,
        }
    }

    fn touches(&self, other: &Install) -> bool {
        self.path.iter().any(|n| other.path.contains(n))
    }
}

const RECENT_PATHS: usize = 64;

#[derive(Debug)]
pub struct Controller {
    id: EntityId,
    manager: EntityId,
    params: ControllerParams,
    status_interval: Duration,
    links: BTreeMap<LinkId, LinkEntry>,
    registered: BTreeSet<EntityId>,
    /// Controller's view of every node's routing table.
    installed: BTreeMap<EntityId, BTreeMap<EntityId, NextHop>>,
    next_install: u64,
    active: Vec<Install>,
    queued: VecDeque<Install>,
    recent: VecDeque<PathComputation>,
    /// (initiator, destination) pairs already served; recomputed on every
    /// status update when routing is proactive.
    served: BTreeMap<(EntityId, EntityId), Vec<EntityId>>,
    heartbeat_seq: u64,
}

impl Controller {
    /// `links` lists every QKD link as (id, CKMS a, CKMS b).
    pub fn new(
        id: EntityId,
        manager: EntityId,
        params: ControllerParams,
        status_interval: Duration,
        links: Vec<(LinkId, EntityId, EntityId)>,
    ) -> Self {
        let mut registered = BTreeSet::new();
        let links = links
            .into_iter()
            .map(|(lid, a, b)| {
                registered.insert(a.clone());
                registered.insert(b.clone());
                (
                    lid,
                    LinkEntry {
                        a,
                        b,
                        admin_up: true,
                        reports: BTreeMap::new(),
                    },
                )
            })
            .collect();
        Self {
            id,
            manager,
            params,
            status_interval,
            links,
            registered,
            installed: BTreeMap::new(),
            next_install: 1,
            active: Vec::new(),
            queued: VecDeque::new(),
            recent: VecDeque::new(),
            served: BTreeMap::new(),
            heartbeat_seq: 0,
        }
    }

    pub fn id(&self) -> &EntityId {
        &self.id
    }

    pub fn recent_paths(&self) -> impl Iterator<Item = &PathComputation> {
        self.recent.iter()
    }

    /// Whether both ends of every link have reported at least once.
    pub fn has_full_view(&self) -> bool {
        self.links
            .values()
            .all(|e| e.reports.contains_key(&e.a) && e.reports.contains_key(&e.b))
    }

    pub fn installed_entry(&self, node: &EntityId, dst: &EntityId) -> Option<&NextHop> {
        self.installed.get(node).and_then(|t| t.get(dst))
    }

    /// Weight from the formula, before staleness or admin state.
    pub fn weight_of(&self, available_bits: u64, rate_bps: f64) -> f64 {
        let p = &self.params;
        p.w_fixed + p.alpha / (available_bits.max(1) as f64) + p.beta / rate_bps.max(p.epsilon)
    }

    fn ewma_factor(&self) -> f64 {
        1.0 - 0.5f64.powf(1.0 / self.params.ewma_half_life_intervals.max(f64::MIN_POSITIVE))
    }

    fn fresh(&self, s: &DirectedState, now: SimTime) -> bool {
        now.saturating_since(s.last_update) <= self.status_interval * 3
    }

    /// Weight of the u→v direction, or None if it is unusable.
    fn directed_weight(
        &self,
        e: &LinkEntry,
        u: &EntityId,
        v: &EntityId,
        now: SimTime,
    ) -> Option<f64> {
        if !e.admin_up {
            return None;
        }
        let mine = e.reports.get(u).filter(|s| self.fresh(s, now))?;
        if !mine.up {
            return None;
        }
        if e.reports
            .get(v)
            .is_some_and(|s| self.fresh(s, now) && !s.up)
        {
            return None;
        }
        Some(self.weight_of(mine.available_bits, mine.refill_rate_bps))
    }

    pub fn graph(&self, now: SimTime) -> Graph {
        let mut g = Graph::new();
        for e in self.links.values() {
            for (u, v) in [(&e.a, &e.b), (&e.b, &e.a)] {
                if let Some(w) = self.directed_weight(e, u, v, now) {
                    g.add_edge(u.clone(), v.clone(), w);
                }
            }
        }
        g
    }

    pub fn compute_path(
        &self,
        src: &EntityId,
        dst: &EntityId,
        now: SimTime,
    ) -> Option<PathComputation> {
        shortest_path(&self.graph(now), src, dst).map(|(path, total_weight)| PathComputation {
            src: src.clone(),
            dst: dst.clone(),
            path,
            total_weight,
            computed_at: now,
        })
    }

    pub fn link_states(&self, now: SimTime) -> Vec<LinkStateView> {
        self.links
            .iter()
            .map(|(lid, e)| {
                let fresh: Vec<&DirectedState> =
                    e.reports.values().filter(|s| self.fresh(s, now)).collect();
                let wab = self.directed_weight(e, &e.a, &e.b, now);
                let wba = self.directed_weight(e, &e.b, &e.a, now);
                LinkStateView {
                    link_id: lid.clone(),
                    endpoints: (e.a.clone(), e.b.clone()),
                    available_bits: fresh.iter().map(|s| s.available_bits).min().unwrap_or(0),
                    refill_rate_bps: fresh
                        .iter()
                        .map(|s| s.refill_rate_bps)
                        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.min(r))))
                        .unwrap_or(0.0),
                    admin_state: if e.admin_up { "UP" } else { "DOWN" },
                    up: wab.is_some() && wba.is_some(),
                    last_update: e.reports.values().map(|s| s.last_update).max(),
                    weight: wab.zip(wba).map(|(x, y)| x.max(y)),
                }
            })
            .collect()
    }

    pub fn handle(&mut self, input: Input, ctx: &mut Ctx) {
        match input {
            Input::Start => ctx.after(Duration::ZERO, Timer::Heartbeat),
            Input::Timer(Timer::Heartbeat) => {
                self.heartbeat_seq += 1;
                ctx.send(
                    &self.manager,
                    NO_CORRELATION,
                    Payload::Heartbeat(Heartbeat {
                        seq: self.heartbeat_seq,
                    }),
                );
                ctx.after(self.status_interval, Timer::Heartbeat);
            }
            Input::Timer(Timer::InstallStep { install_id, step }) => {
                let stuck = self
                    .active
                    .iter()
                    .any(|i| i.id == install_id && i.step == step);
                if stuck {
                    self.abort(install_id, ctx);
                }
            }
            Input::Message(msg) => self.on_message(msg, ctx),
            Input::Undeliverable { msg, .. } => {
                if let Payload::RouteUpdate(u) = msg.body {
                    if self.active.iter().any(|i| i.id == u.install_id) {
                        self.abort(u.install_id, ctx);
                    }
                }
            }
            _ => {}
        }
    }

    fn on_message(&mut self, msg: ProtocolMessage, ctx: &mut Ctx) {
        if msg.from == self.manager {
            if let Payload::Alarm(a) = &msg.body {
                self.on_manager_alarm(a);
            }
            return;
        }
        if !self.registered.contains(&msg.from) {
            ctx.alarm(
                &self.manager,
                Severity::Warn,
                AlarmKind::UnknownSender,
                Some(msg.from.to_string()),
            );
            return;
        }
        match msg.body {
            Payload::StatusUpdate(s) => {
                for r in &s.links {
                    self.ingest_report(&msg.from, r, ctx.now);
                }
                if self.params.proactive {
                    self.refresh_served(ctx);
                }
            }
            Payload::RouteRequest(RouteRequest { destination }) => {
                self.route_request(msg.from, msg.correlation_id, destination, ctx);
            }
            Payload::RouteAck(ack) => self.on_route_ack(&msg.from, ack, ctx),
            _ => {}
        }
    }

    fn on_manager_alarm(&mut self, a: &AlarmReport) {
        let Some(lid) = &a.subject else { return };
        if let Some(e) = self.links.get_mut(lid) {
            match a.kind {
                AlarmKind::LinkDown => e.admin_up = false,
                AlarmKind::LinkUp => e.admin_up = true,
                _ => {}
            }
        }
    }

    /// Merges one report from `from` about the link it shares with `r.peer`.
    pub fn ingest_report(&mut self, from: &EntityId, r: &LinkReport, now: SimTime) {
        let k = self.ewma_factor();
        let Some(e) = self.links.get_mut(&r.link_id) else {
            return;
        };
        if from != &e.a && from != &e.b {
            return;
        }
        let rate = match e.reports.get(from) {
            Some(prev) => prev.refill_rate_bps + k * (r.refill_rate_bps - prev.refill_rate_bps),
            None => r.refill_rate_bps,
        };
        e.reports.insert(
            from.clone(),
            DirectedState {
                available_bits: r.available_bits,
                refill_rate_bps: rate,
                up: r.up,
                last_update: now,
            },
        );
    }

    fn route_request(
        &mut self,
        initiator: EntityId,
        corr: CorrelationId,
        destination: EntityId,
        ctx: &mut Ctx,
    ) {
        let Some(pc) = self.compute_path(&initiator, &destination, ctx.now) else {
            ctx.send(
                &initiator,
                corr,
                Payload::RouteAck(RouteAck {
                    install_id: 0,
                    destination,
                    result: RouteResult::Failed {
                        code: ErrorCode::NoPath,
                    },
                }),
            );
            return;
        };
        self.served
            .insert((initiator.clone(), destination.clone()), pc.path.clone());
        self.enqueue(initiator, corr, pc, ctx);
    }

    fn enqueue(
        &mut self,
        initiator: EntityId,
        corr: CorrelationId,
        pc: PathComputation,
        ctx: &mut Ctx,
    ) {
        let path = pc.path.clone();
        self.recent.push_back(pc);
        if self.recent.len() > RECENT_PATHS {
            self.recent.pop_front();
        }
        let id = self.next_install;
        self.next_install += 1;
        let install = Install {
            id,
            initiator,
            corr,
            destination: path.last().expect("paths are non-empty").clone(),
            previous: Vec::with_capacity(path.len()),
            path,
            step: 0,
            version: None,
        };
        self.queued.push_back(install);
        self.start_queued(ctx);
    }

    fn refresh_served(&mut self, ctx: &mut Ctx) {
        let pairs: Vec<_> = self
            .served
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for ((src, dst), old) in pairs {
            if let Some(pc) = self.compute_path(&src, &dst, ctx.now) {
                if pc.path != old {
                    self.served.insert((src.clone(), dst), pc.path.clone());
                    self.enqueue(src, NO_CORRELATION, pc, ctx);
                }
            }
        }
    }

    /// Starts every queued install that shares no node with an active one,
    /// keeping FIFO order among those that conflict.
    fn start_queued(&mut self, ctx: &mut Ctx) {
        let mut waiting = VecDeque::new();
        while let Some(mut inst) = self.queued.pop_front() {
            let blocked = self.active.iter().any(|a| a.touches(&inst))
                || waiting.iter().any(|w: &Install| w.touches(&inst));
            if blocked {
                waiting.push_back(inst);
                continue;
            }
            self.send_step(&mut inst, ctx);
            self.active.push(inst);
        }
        self.queued = waiting;
    }

    fn send_step(&mut self, inst: &mut Install, ctx: &mut Ctx) {
        let node = inst.path[inst.step].clone();
        let prev = self.installed_entry(&node, &inst.destination).cloned();
        inst.previous.push(prev);
        ctx.send(
            &node,
            inst.corr,
            Payload::RouteUpdate(RouteUpdate {
                install_id: inst.id,
                destination: inst.destination.clone(),
                entry: Some(inst.entry(inst.step)),
            }),
        );
        ctx.after(
            Duration::from_millis(self.params.install_timeout_ms),
            Timer::InstallStep {
                install_id: inst.id,
                step: inst.step,
            },
        );
    }

    fn on_route_ack(&mut self, from: &EntityId, ack: RouteAck, ctx: &mut Ctx) {
        let Some(pos) = self.active.iter().position(|i| {
            i.id == ack.install_id
                && i.path.get(i.step) == Some(from)
                && i.destination == ack.destination
        }) else {
            return;
        };
        match ack.result {
            RouteResult::Failed { .. } => self.abort(ack.install_id, ctx),
            RouteResult::Installed { version } => {
                let mut inst = self.active.remove(pos);
                let entry = inst.entry(inst.step);
                self.installed
                    .entry(from.clone())
                    .or_default()
                    .insert(inst.destination.clone(), entry);
                if from == &inst.initiator {
                    inst.version = Some(version);
                }
                inst.step += 1;
                if inst.step < inst.path.len() {
                    self.send_step(&mut inst, ctx);
                    self.active.push(inst);
                } else {
                    let version = inst.version.unwrap_or(version);
                    ctx.send(
                        &inst.initiator,
                        inst.corr,
                        Payload::RouteAck(RouteAck {
                            install_id: inst.id,
                            destination: inst.destination.clone(),
                            result: RouteResult::Installed { version },
                        }),
                    );
                    self.start_queued(ctx);
                }
            }
        }
    }

    /// Restores every node already confirmed, then reports NO_PATH.
    fn abort(&mut self, install_id: u64, ctx: &mut Ctx) {
        let Some(pos) = self.active.iter().position(|i| i.id == install_id) else {
            return;
        };
        let inst = self.active.remove(pos);
        for (node, prev) in inst.path.iter().zip(&inst.previous).take(inst.step) {
            let table = self.installed.entry(node.clone()).or_default();
            match prev {
                Some(p) => table.insert(inst.destination.clone(), p.clone()),
                None => table.remove(&inst.destination),
            };
            ctx.send(
                node,
                inst.corr,
                Payload::RouteUpdate(RouteUpdate {
                    install_id: inst.id,
                    destination: inst.destination.clone(),
                    entry: prev.clone(),
                }),
            );
        }
        self.served
            .remove(&(inst.initiator.clone(), inst.destination.clone()));
        ctx.send(
            &inst.initiator,
            inst.corr,
            Payload::RouteAck(RouteAck {
                install_id: inst.id,
                destination: inst.destination.clone(),
                result: RouteResult::Failed {
                    code: ErrorCode::NoPath,
                },
            }),
        );
        self.start_queued(ctx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::MsgId;
    use proptest::prelude::*;

    fn n(i: u32) -> EntityId {
        EntityId::ckms(&format!("node-{i}"))
    }

    fn reference_links() -> Vec<(LinkId, EntityId, EntityId)> {
        let mut v: Vec<_> = (2..14)
            .map(|i| (format!("{i}-{}", i + 1), n(i), n(i + 1)))
            .collect();
        v.push(("7-16".into(), n(7), n(16)));
        v.push(("16-8".into(), n(16), n(8)));
        v
    }

    fn controller() -> Controller {
        Controller::new(
            EntityId::controller("dc"),
            EntityId::manager("dc"),
            ControllerParams::default(),
            Duration::from_secs(30),
            reference_links(),
        )
    }

    fn report_all(c: &mut Controller, now: SimTime, down: &[&str]) {
        for (lid, a, b) in reference_links() {
            for (u, v) in [(&a, &b), (&b, &a)] {
                let r = LinkReport {
                    link_id: lid.clone(),
                    peer: v.clone(),
                    available_bits: 1 << 20,
                    refill_rate_bps: 2000.0,
                    up: !down.contains(&lid.as_str()),
                };
                c.ingest_report(u, &r, now);
            }
        }
    }

    fn msg(from: EntityId, body: Payload) -> Input {
        Input::Message(ProtocolMessage::new(
            MsgId::NIL,
            CorrelationId::NIL,
            from,
            EntityId::controller("dc"),
            body,
        ))
    }

    #[test]
    fn weight_grows_as_pool_drains() {
        let c = controller();
        assert!(c.weight_of(256, 2000.0) > c.weight_of(2560, 2000.0));
        assert!(c.weight_of(2560, 100.0) > c.weight_of(2560, 2000.0));
        assert_eq!(c.weight_of(0, 0.0), 1.0 + 1e5 + 1e4);
    }

    #[test]
    fn stale_links_are_down() {
        let mut c = controller();
        report_all(&mut c, SimTime::ZERO, &[]);
        assert!(c
            .compute_path(&n(14), &n(2), SimTime::from_secs(90))
            .is_some());
        assert!(c
            .compute_path(&n(14), &n(2), SimTime::from_secs(91))
            .is_none());
    }

    #[test]
    fn unregistered_sender_is_dropped_with_alarm() {
        let mut c = controller();
        let mut ctx = Ctx::new(c.id().clone(), SimTime::ZERO);
        c.handle(
            msg(
                n(99),
                Payload::RouteRequest(RouteRequest { destination: n(2) }),
            ),
            &mut ctx,
        );
        assert_eq!(ctx.out.len(), 1);
        assert_eq!(ctx.out[0].to, EntityId::manager("dc"));
        assert!(matches!(
            ctx.out[0].body,
            Payload::Alarm(AlarmReport {
                kind: AlarmKind::UnknownSender,
                ..
            })
        ));
    }

    #[test]
    fn chain_path_and_bypass_on_failure() {
        let mut c = controller();
        report_all(&mut c, SimTime::ZERO, &[]);
        let p = c.compute_path(&n(14), &n(2), SimTime::ZERO).unwrap();
        assert_eq!(p.path, (2..=14).rev().map(n).collect::<Vec<_>>());

        report_all(&mut c, SimTime::from_secs(1), &["7-8"]);
        let p = c
            .compute_path(&n(14), &n(2), SimTime::from_secs(1))
            .unwrap();
        assert!(p.path.contains(&n(16)));
        let brute = brute_force_path(&c.graph(SimTime::from_secs(1)), &n(14), &n(2)).unwrap();
        assert_eq!(p.path, brute.0);

        report_all(&mut c, SimTime::from_secs(2), &["7-8", "16-8"]);
        assert!(c
            .compute_path(&n(14), &n(2), SimTime::from_secs(2))
            .is_none());
        assert!(brute_force_path(&c.graph(SimTime::from_secs(2)), &n(14), &n(2)).is_none());
    }

    #[test]
    fn admin_down_from_manager_removes_link() {
        let mut c = controller();
        report_all(&mut c, SimTime::ZERO, &[]);
        let mut ctx = Ctx::new(c.id().clone(), SimTime::ZERO);
        c.handle(
            msg(
                EntityId::manager("dc"),
                Payload::Alarm(AlarmReport {
                    severity: Severity::Critical,
                    kind: AlarmKind::LinkDown,
                    subject: Some("7-8".into()),
                }),
            ),
            &mut ctx,
        );
        let p = c.compute_path(&n(14), &n(2), SimTime::ZERO).unwrap();
        assert!(p.path.contains(&n(16)));
        assert_eq!(
            c.link_states(SimTime::ZERO)
                .iter()
                .find(|l| l.link_id == "7-8")
                .unwrap()
                .admin_state,
            "DOWN"
        );
    }

    #[test]
    fn equal_branches_break_ties_by_node_sequence() {
        // two equal-weight branches a->x->d and a->y->d
        let (a, x, y, d) = (n(1), n(5), n(30), n(9));
        let mut g = Graph::new();
        g.add_undirected(a.clone(), x.clone(), 2.0);
        g.add_undirected(x.clone(), d.clone(), 2.0);
        g.add_undirected(a.clone(), y.clone(), 2.0);
        g.add_undirected(y.clone(), d.clone(), 2.0);
        let (p, w) = shortest_path(&g, &a, &d).unwrap();
        // "CKMS/node-30" sorts before "CKMS/node-5"
        assert_eq!(p, vec![a.clone(), y, d.clone()]);
        assert_eq!(w, 4.0);
        assert_eq!(brute_force_path(&g, &a, &d).unwrap().0, p);
    }

    fn random_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize, u32)>)> {
        (2usize..=12).prop_flat_map(|nodes| {
            let edge = (0..nodes, 0..nodes, 1u32..20);
            (Just(nodes), proptest::collection::vec(edge, 0..40))
        })
    }

    fn build(edges: &[(usize, usize, u32)]) -> Graph {
        let mut g = Graph::new();
        for &(u, v, w) in edges {
            if u != v {
                g.add_edge(n(u as u32), n(v as u32), w as f64);
            }
        }
        g
    }

    proptest! {
        #[test]
        fn dijkstra_matches_brute_force((nodes, edges) in random_graph()) {
            let g = build(&edges);
            let dst = n(nodes as u32 - 1);
            let fast = shortest_path(&g, &n(0), &dst);
            let slow = brute_force_path(&g, &n(0), &dst);
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn scaling_weights_keeps_the_path((nodes, edges) in random_graph(), k in prop::sample::select(vec![0.5, 2.0, 3.0, 7.0, 1024.0])) {
            let g = build(&edges);
            let dst = n(nodes as u32 - 1);
            let base = shortest_path(&g, &n(0), &dst).map(|p| p.0);
            let scaled = shortest_path(&g.scaled(k), &n(0), &dst).map(|p| p.0);
            prop_assert_eq!(base, scaled);
        }
    }

    fn route_updates(ctx: &Ctx) -> Vec<(EntityId, RouteUpdate)> {
        ctx.out
            .iter()
            .filter_map(|o| match &o.body {
                Payload::RouteUpdate(u) => Some((o.to.clone(), u.clone())),
                _ => None,
            })
            .collect()
    }

    fn ack(
        c: &mut Controller,
        from: EntityId,
        install_id: u64,
        dst: &EntityId,
        version: u64,
    ) -> Ctx {
        let mut ctx = Ctx::new(c.id().clone(), SimTime::from_secs(1));
        c.handle(
            msg(
                from,
                Payload::RouteAck(RouteAck {
                    install_id,
                    destination: dst.clone(),
                    result: RouteResult::Installed { version },
                }),
            ),
            &mut ctx,
        );
        ctx
    }

    fn request(c: &mut Controller, from: EntityId, dst: EntityId) -> Ctx {
        let mut ctx = Ctx::new(c.id().clone(), SimTime::from_secs(1));
        c.handle(
            msg(
                from,
                Payload::RouteRequest(RouteRequest { destination: dst }),
            ),
            &mut ctx,
        );
        ctx
    }

    #[test]
    fn install_walks_the_path_then_acks_the_initiator() {
        let mut c = controller();
        report_all(&mut c, SimTime::ZERO, &[]);
        let mut ctx = request(&mut c, n(14), n(2));
        let mut order = Vec::new();
        loop {
            let ups = route_updates(&ctx);
            if ups.is_empty() {
                break;
            }
            assert_eq!(ups.len(), 1, "one node at a time");
            let (node, u) = ups[0].clone();
            order.push(node.clone());
            ctx = ack(&mut c, node, u.install_id, &u.destination, 7);
        }
        assert_eq!(order, (2..=14).rev().map(n).collect::<Vec<_>>());
        assert!(matches!(
            &ctx.out[0].body,
            Payload::RouteAck(RouteAck {
                result: RouteResult::Installed { version: 7 },
                ..
            })
        ));
        assert_eq!(ctx.out[0].to, n(14));
        assert_eq!(c.installed_entry(&n(2), &n(2)), Some(&NextHop::Local));
        assert_eq!(c.installed_entry(&n(14), &n(2)), Some(&NextHop::Via(n(13))));
    }

    #[test]
    fn timeout_rolls_back_confirmed_nodes() {
        let mut c = controller();
        report_all(&mut c, SimTime::ZERO, &[]);
        let mut ctx = request(&mut c, n(14), n(2));
        let mut id = 0;
        // nodes 14..10 confirm, node 9 never answers
        for _ in 0..5 {
            let (node, u) = route_updates(&ctx)[0].clone();
            id = u.install_id;
            ctx = ack(&mut c, node, u.install_id, &u.destination, 1);
        }
        assert_eq!(route_updates(&ctx)[0].0, n(9));
        let mut ctx = Ctx::new(c.id().clone(), SimTime::from_secs(2));
        c.handle(
            Input::Timer(Timer::InstallStep {
                install_id: id,
                step: 5,
            }),
            &mut ctx,
        );
        let rolled: Vec<_> = route_updates(&ctx);
        assert_eq!(
            rolled.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
            (10..=14).rev().map(n).collect::<Vec<_>>()
        );
        assert!(rolled.iter().all(|(_, u)| u.entry.is_none()));
        assert!(c.installed_entry(&n(12), &n(2)).is_none());
        let last = ctx.out.last().unwrap();
        assert_eq!(last.to, n(14));
        assert!(matches!(
            &last.body,
            Payload::RouteAck(RouteAck {
                result: RouteResult::Failed {
                    code: ErrorCode::NoPath
                },
                ..
            })
        ));
    }

    #[test]
    fn disjoint_installs_interleave_and_overlapping_ones_queue() {
        let mut c = controller();
        report_all(&mut c, SimTime::ZERO, &[]);
        let a = request(&mut c, n(3), n(2));
        let b = request(&mut c, n(13), n(14));
        assert_eq!(route_updates(&a).len(), 1);
        assert_eq!(route_updates(&b).len(), 1);
        // overlaps with the first install at node 3
        let q = request(&mut c, n(4), n(3));
        assert!(route_updates(&q).is_empty());

        let (node, u) = route_updates(&b)[0].clone();
        let ctx = ack(&mut c, node, u.install_id, &u.destination, 1);
        let (node, u) = route_updates(&ctx)[0].clone();
        let done_b = ack(&mut c, node, u.install_id, &u.destination, 1);
        assert!(matches!(done_b.out[0].body, Payload::RouteAck(_)));

        let (node, u) = route_updates(&a)[0].clone();
        let ctx = ack(&mut c, node, u.install_id, &u.destination, 1);
        let (node, u) = route_updates(&ctx)[0].clone();
        let done_a = ack(&mut c, node, u.install_id, &u.destination, 1);
        // completing the first install releases the queued one
        assert!(done_a
            .out
            .iter()
            .any(|o| matches!(o.body, Payload::RouteAck(_)) && o.to == n(3)));
        assert_eq!(route_updates(&done_a)[0].0, n(4));
    }

    #[test]
    fn no_path_is_reported_immediately() {
        let mut c = controller();
        let ctx = request(&mut c, n(14), n(2));
        assert!(matches!(
            &ctx.out[0].body,
            Payload::RouteAck(RouteAck {
                result: RouteResult::Failed {
                    code: ErrorCode::NoPath
                },
                ..
            })
        ));
    }

    #[test]
    fn rate_is_smoothed_with_half_life() {
        let mut c = controller();
        let r = |rate| LinkReport {
            link_id: "2-3".into(),
            peer: n(3),
            available_bits: 100,
            refill_rate_bps: rate,
            up: true,
        };
        c.ingest_report(&n(2), &r(1000.0), SimTime::ZERO);
        for _ in 0..5 {
            c.ingest_report(&n(2), &r(2000.0), SimTime::ZERO);
        }
        let s = &c.links["2-3"].reports[&n(2)];
        // five intervals close half of the gap
        assert!((s.refill_rate_bps - 1500.0).abs() < 1e-9);
    }
}
