//! Socket backend: every component runs as a tokio task, every channel is a
//! TCP connection on loopback.
//!
//! Wire framing is `length(4, BE) ‖ kind(1) ‖ body`, where `length` counts
//! the body only. Kind [`KIND_JSON`] carries canonical JSON; kind
//! [`KIND_RELAY`] carries a raw relay octet frame and always follows the
//! JSON header of the hop it belongs to. Connections open with a
//! challenge-response handshake keyed by a per-channel secret derived from
//! the deployment's pre-shared key, so both ends prove who they are before
//! any message flows.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use hmac::{Hmac, KeyInit as _, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use super::sim::FabricStats;
use super::{ChannelRegistry, MsgRecord, NotifyRecord, ObserveRecord, TraceRecord, TraceSink};
use crate::crypto_relay::{enforce_policy, PolicyDecision, WrappedKey};
use crate::deploy::{Deployment, LinkBinding};
use crate::domain::{
    CorrelationId, DeliveredKey, EntityId, ErrorCode, ErrorReport, KeyId, KeyRequest, MsgId,
    Payload, PoolKey, ProtocolMessage, QbnRelay, RelayFrame, SimTime,
};
use crate::engine::{ActorEvent, Command, Ctx, Input, Node};
use crate::qkd_link_sim::{deliver_directed, deliver_to_kms, LinkStatus, Telemetry};

pub const KIND_JSON: u8 = 0x01;
pub const KIND_RELAY: u8 = 0x02;
/// Largest body accepted from the wire.
pub const MAX_FRAME: usize = 1 << 24;

const PREFILL_CHUNK_BITS: usize = 1 << 16;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

type HmacSha256 = Hmac<Sha256>;

pub async fn write_frame<W: AsyncWrite + Unpin>(
    w: &mut W,
    kind: u8,
    body: &[u8],
) -> io::Result<()> {
    if body.len() > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "frame too large",
        ));
    }
    let mut buf = Vec::with_capacity(5 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.push(kind);
    buf.extend_from_slice(body);
    w.write_all(&buf).await
}

/// Reads one frame; `None` on a clean end of stream.
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> io::Result<Option<(u8, Vec<u8>)>> {
    let len = match r.read_u32().await {
        Ok(n) => n as usize,
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    };
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "frame too large",
        ));
    }
    let kind = r.read_u8().await?;
    if kind != KIND_JSON && kind != KIND_RELAY {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "unknown frame kind",
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await?;
    Ok(Some((kind, body)))
}

/// JSON frames on the wire.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "wire", rename_all = "snake_case")]
enum Wire {
    Hello {
        from: EntityId,
        to: EntityId,
        nonce: String,
    },
    Challenge {
        nonce: String,
        mac: String,
    },
    Proof {
        mac: String,
    },
    Message(ProtocolMessage),
    /// Everything of a relay hop except the octet frame, which follows.
    RelayHeader {
        msg_id: MsgId,
        corr: CorrelationId,
        from: EntityId,
        to: EntityId,
        destination: EntityId,
        key_id: KeyId,
        hop_count: u32,
    },
}

fn bad(what: &'static str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, what)
}

async fn send_wire<W: AsyncWrite + Unpin>(w: &mut W, msg: &Wire) -> io::Result<()> {
    write_frame(
        w,
        KIND_JSON,
        &serde_json::to_vec(msg).expect("wire frames serialize"),
    )
    .await
}

async fn recv_wire<R: AsyncRead + Unpin>(r: &mut R) -> io::Result<Wire> {
    match read_frame(r).await? {
        Some((KIND_JSON, body)) => {
            serde_json::from_slice(&body).map_err(|_| bad("malformed JSON frame"))
        }
        Some(_) => Err(bad("unexpected relay frame")),
        None => Err(io::ErrorKind::UnexpectedEof.into()),
    }
}

/// Secret of one channel, derived from the deployment key and channel id.
pub fn channel_key(psk: &[u8], channel_id: &str) -> Vec<u8> {
    let mut m = HmacSha256::new_from_slice(psk).expect("HMAC accepts any key length");
    m.update(b"qkdn channel ");
    m.update(channel_id.as_bytes());
    m.finalize().into_bytes().to_vec()
}

fn proof(key: &[u8], role: &[u8], first: &[u8], second: &[u8]) -> HmacSha256 {
    let mut m = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    m.update(role);
    m.update(first);
    m.update(second);
    m
}

fn nonce() -> [u8; 32] {
    let mut n = [0u8; 32];
    rand::rng().fill_bytes(&mut n);
    n
}

fn verify(key: &[u8], role: &[u8], first: &[u8], second: &[u8], mac_hex: &str) -> io::Result<()> {
    let mac = hex::decode(mac_hex).map_err(|_| bad("malformed proof"))?;
    proof(key, role, first, second)
        .verify_slice(&mac)
        .map_err(|_| {
            io::Error::new(
                io::ErrorKind::PermissionDenied,
                "peer failed authentication",
            )
        })
}

/// Client half of the handshake: proves `me` to `peer` and checks `peer`.
pub async fn handshake_client<S: AsyncRead + AsyncWrite + Unpin>(
    s: &mut S,
    me: &EntityId,
    peer: &EntityId,
    key: &[u8],
) -> io::Result<()> {
    let nc = nonce();
    send_wire(
        s,
        &Wire::Hello {
            from: me.clone(),
            to: peer.clone(),
            nonce: hex::encode(nc),
        },
    )
    .await?;
    let Wire::Challenge { nonce: ns, mac } = recv_wire(s).await? else {
        return Err(bad("expected challenge"));
    };
    let ns = hex::decode(ns).map_err(|_| bad("malformed nonce"))?;
    verify(key, b"server", &nc, &ns, &mac)?;
    let mine = proof(key, b"client", &ns, &nc).finalize().into_bytes();
    send_wire(
        s,
        &Wire::Proof {
            mac: hex::encode(mine),
        },
    )
    .await
}

/// Server half: learns who is calling, looks up the channel key with
/// `key_for` and checks the caller's proof. Returns the authenticated peer.
pub async fn handshake_server<S, F>(s: &mut S, me: &EntityId, key_for: F) -> io::Result<EntityId>
where
    S: AsyncRead + AsyncWrite + Unpin,
    F: FnOnce(&EntityId) -> Option<Vec<u8>>,
{
    let Wire::Hello {
        from,
        to,
        nonce: nc,
    } = recv_wire(s).await?
    else {
        return Err(bad("expected hello"));
    };
    if &to != me {
        return Err(bad("hello for another component"));
    }
    let key = key_for(&from)
        .ok_or_else(|| io::Error::new(io::ErrorKind::PermissionDenied, "no channel to caller"))?;
    let nc = hex::decode(nc).map_err(|_| bad("malformed nonce"))?;
    let ns = nonce();
    let mac = proof(&key, b"server", &nc, &ns).finalize().into_bytes();
    send_wire(
        s,
        &Wire::Challenge {
            nonce: hex::encode(ns),
            mac: hex::encode(mac),
        },
    )
    .await?;
    let Wire::Proof { mac } = recv_wire(s).await? else {
        return Err(bad("expected proof"));
    };
    verify(&key, b"client", &ns, &nc, &mac)?;
    Ok(from)
}

async fn write_message<W: AsyncWrite + Unpin>(w: &mut W, msg: &ProtocolMessage) -> io::Result<()> {
    if let Payload::QbnRelay(QbnRelay::Hop(f)) = &msg.body {
        let header = Wire::RelayHeader {
            msg_id: msg.msg_id,
            corr: msg.correlation_id,
            from: msg.from.clone(),
            to: msg.to.clone(),
            destination: f.destination.clone(),
            key_id: f.key_id,
            hop_count: f.hop_count,
        };
        send_wire(w, &header).await?;
        return write_frame(w, KIND_RELAY, &f.wrapped.encode()).await;
    }
    write_frame(w, KIND_JSON, &msg.to_json()).await
}

async fn read_message<R: AsyncRead + Unpin>(r: &mut R) -> io::Result<Option<ProtocolMessage>> {
    let Some((kind, body)) = read_frame(r).await? else {
        return Ok(None);
    };
    if kind != KIND_JSON {
        return Err(bad("relay frame without header"));
    }
    let v: serde_json::Value =
        serde_json::from_slice(&body).map_err(|_| bad("malformed JSON frame"))?;
    if v.get("wire").and_then(|w| w.as_str()) != Some("relay_header") {
        return ProtocolMessage::from_json(&body)
            .map(Some)
            .map_err(|_| bad("malformed message"));
    }
    let Ok(Wire::RelayHeader {
        msg_id,
        corr,
        from,
        to,
        destination,
        key_id,
        hop_count,
    }) = serde_json::from_value(v)
    else {
        return Err(bad("malformed relay header"));
    };
    let Some((KIND_RELAY, frame)) = read_frame(r).await? else {
        return Err(bad("relay header without frame"));
    };
    let wrapped = WrappedKey::decode(&frame).map_err(|_| bad("malformed relay frame"))?;
    let body = Payload::QbnRelay(QbnRelay::Hop(RelayFrame {
        destination,
        key_id,
        hop_count,
        wrapped,
    }));
    Ok(Some(ProtocolMessage::new(msg_id, corr, from, to, body)))
}

type ApiResult = Result<Vec<DeliveredKey>, ErrorReport>;

struct Shared {
    epoch: Instant,
    nodes: BTreeMap<EntityId, Mutex<Node>>,
    inboxes: BTreeMap<EntityId, mpsc::UnboundedSender<Input>>,
    wires: Mutex<BTreeMap<(EntityId, EntityId), mpsc::UnboundedSender<ProtocolMessage>>>,
    channels: Mutex<ChannelRegistry>,
    links: Mutex<Vec<LinkBinding>>,
    trace: Mutex<TraceSink>,
    telemetry: Mutex<Vec<Telemetry>>,
    stats: Mutex<FabricStats>,
    ids: Mutex<ChaCha8Rng>,
    waiters: Mutex<BTreeMap<u64, oneshot::Sender<ApiResult>>>,
    next_request: AtomicU64,
}

impl Shared {
    fn now(&self) -> SimTime {
        SimTime::from_micros(self.epoch.elapsed().as_micros() as u64)
    }

    fn deliver(&self, to: &EntityId, input: Input) {
        if let Some(tx) = self.inboxes.get(to) {
            let _ = tx.send(input);
        }
    }

    fn record(&self, rec: TraceRecord) {
        self.trace.lock().expect("trace lock").record(&rec);
    }

    fn tracing(&self) -> bool {
        self.trace.lock().expect("trace lock").enabled()
    }

    fn apply(self: &Arc<Self>, ctx: Ctx) {
        let t = self.now().as_micros();
        if self.tracing() {
            for o in &ctx.observations {
                self.record(TraceRecord::Observe(ObserveRecord {
                    t,
                    holder: ctx.me.clone(),
                    role: o.role,
                    key_id: o.key_id,
                    hex: hex::encode(&o.octets),
                }));
            }
        }
        for (delay, timer) in ctx.timers {
            let shared = Arc::clone(self);
            let me = ctx.me.clone();
            tokio::spawn(async move {
                tokio::time::sleep(delay).await;
                shared.deliver(&me, Input::Timer(timer));
            });
        }
        for out in ctx.out {
            let id = MsgId::random(&mut *self.ids.lock().expect("id lock"));
            self.send(ProtocolMessage::new(
                id,
                out.corr,
                ctx.me.clone(),
                out.to,
                out.body,
            ));
        }
        for n in ctx.notifies {
            if self.tracing() {
                self.record(TraceRecord::Notify(NotifyRecord {
                    t,
                    corr: n.corr,
                    from: n.master.clone(),
                    to: n.slave.clone(),
                    key_ids: n.key_ids.clone(),
                }));
            }
            let to = n.slave.clone();
            self.deliver(&to, Input::Command(Command::Notify(n)));
        }
        for ev in ctx.events {
            let ActorEvent::ApiResponse { request_id, result } = ev;
            if let Some(tx) = self
                .waiters
                .lock()
                .expect("waiter lock")
                .remove(&request_id)
            {
                let _ = tx.send(result);
            }
        }
    }

    fn send(&self, msg: ProtocolMessage) {
        let (fate, chan_id) = {
            let channels = self.channels.lock().expect("channel lock");
            let chan = channels.lookup(&msg.from, &msg.to);
            let fate = match enforce_policy(&msg, chan) {
                PolicyDecision::Deny(reason) => {
                    Err((format!("deny:{}", reason.as_str()), ErrorCode::PolicyDeny))
                }
                PolicyDecision::Allow if !chan.is_some_and(|c| c.up) => {
                    Err(("lost:CHANNEL_DOWN".to_string(), ErrorCode::ChannelDown))
                }
                PolicyDecision::Allow => Ok(()),
            };
            (fate, chan.map(|c| c.id.clone()))
        };
        let fate = fate.and_then(|()| {
            let wires = self.wires.lock().expect("wire lock");
            match wires.get(&(msg.from.clone(), msg.to.clone())) {
                Some(tx) if tx.send(msg.clone()).is_ok() => Ok(()),
                _ => Err(("lost:NOT_CONNECTED".to_string(), ErrorCode::ChannelDown)),
            }
        });
        if self.tracing() {
            let outcome = match &fate {
                Ok(()) => "delivered".to_string(),
                Err((o, _)) => o.clone(),
            };
            self.record(TraceRecord::Msg(MsgRecord::new(
                self.now().as_micros(),
                &msg,
                chan_id.as_deref(),
                outcome,
            )));
        }
        let mut stats = self.stats.lock().expect("stats lock");
        stats.sent += 1;
        match fate {
            Ok(()) => stats.delivered += 1,
            Err((outcome, reason)) => {
                let bucket = if outcome.starts_with("deny:") {
                    &mut stats.denied
                } else {
                    &mut stats.lost
                };
                *bucket.entry(outcome).or_default() += 1;
                drop(stats);
                let from = msg.from.clone();
                self.deliver(&from, Input::Undeliverable { msg, reason });
            }
        }
    }

    fn tick_links(&self, dt: Duration) {
        let now = self.now();
        let mut links = self.links.lock().expect("link lock");
        for b in links.iter_mut() {
            let out = b.link.tick(now, dt);
            self.telemetry
                .lock()
                .expect("telemetry lock")
                .push(out.telemetry);
            if out.a_blocks.is_empty() {
                continue;
            }
            let stored = self.with_pair(&b.kms_a, &b.kms_b, |sa, sz| {
                deliver_to_kms(&b.kms_a, sa, &b.kms_b, sz, out.a_blocks).stored_blocks
            });
            if stored.unwrap_or(0) > 0 {
                self.deliver(
                    &b.kms_a,
                    Input::KeysRefilled {
                        peer: b.kms_b.clone(),
                    },
                );
                self.deliver(
                    &b.kms_b,
                    Input::KeysRefilled {
                        peer: b.kms_a.clone(),
                    },
                );
            }
        }
    }

    /// Runs `f` on the stores of two components, locking in id order.
    fn with_pair<R>(
        &self,
        a: &EntityId,
        z: &EntityId,
        f: impl FnOnce(&mut crate::domain::KeyStore, &mut crate::domain::KeyStore) -> R,
    ) -> Option<R> {
        let (ma, mz) = (self.nodes.get(a)?, self.nodes.get(z)?);
        let (mut na, mut nz) = if a < z {
            let x = ma.lock().expect("node lock");
            (x, mz.lock().expect("node lock"))
        } else {
            let y = mz.lock().expect("node lock");
            (ma.lock().expect("node lock"), y)
        };
        match (na.store_mut(), nz.store_mut()) {
            (Some(sa), Some(sz)) => Some(f(sa, sz)),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub struct SocketOptions {
    /// Deployment-wide pre-shared key the channel secrets derive from.
    pub psk: Vec<u8>,
    pub link_tick: Duration,
    /// Bits loaded into each direction of every link before start.
    pub prefill_bits: usize,
    pub trace: TraceSink,
    pub seed: u64,
}

/// A running deployment on loopback TCP.
pub struct SocketNet {
    shared: Arc<Shared>,
    tasks: Vec<JoinHandle<()>>,
    addrs: BTreeMap<EntityId, SocketAddr>,
}

impl std::fmt::Debug for SocketNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SocketNet")
            .field("addrs", &self.addrs)
            .finish_non_exhaustive()
    }
}

impl SocketNet {
    /// Binds a listener per component, connects and authenticates every
    /// channel, pre-fills the pools and boots the components. Returns once
    /// the controller has heard from both ends of every link.
    pub async fn launch(dep: Deployment, opts: SocketOptions) -> io::Result<SocketNet> {
        let mut inboxes = BTreeMap::new();
        let mut receivers = Vec::new();
        for id in dep.nodes.keys() {
            let (tx, rx) = mpsc::unbounded_channel();
            inboxes.insert(id.clone(), tx);
            receivers.push((id.clone(), rx));
        }
        let expected = 2 * dep.channels.len();
        let controller = dep.controller.clone();
        let shared = Arc::new(Shared {
            epoch: Instant::now(),
            nodes: dep
                .nodes
                .into_iter()
                .map(|(k, v)| (k, Mutex::new(v)))
                .collect(),
            inboxes,
            wires: Mutex::new(BTreeMap::new()),
            channels: Mutex::new(dep.channels),
            links: Mutex::new(dep.links),
            trace: Mutex::new(opts.trace),
            telemetry: Mutex::new(Vec::new()),
            stats: Mutex::new(FabricStats::default()),
            ids: Mutex::new(ChaCha8Rng::seed_from_u64(opts.seed)),
            waiters: Mutex::new(BTreeMap::new()),
            next_request: AtomicU64::new(1),
        });
        let psk = Arc::new(opts.psk);
        let mut tasks = Vec::new();
        let mut addrs = BTreeMap::new();
        for id in shared.nodes.keys() {
            let listener = TcpListener::bind("127.0.0.1:0").await?;
            addrs.insert(id.clone(), listener.local_addr()?);
            tasks.push(tokio::spawn(accept_loop(
                Arc::clone(&shared),
                id.clone(),
                listener,
                Arc::clone(&psk),
            )));
        }
        let pairs: Vec<(EntityId, EntityId, String)> = {
            let channels = shared.channels.lock().expect("channel lock");
            channels
                .iter()
                .map(|c| (c.a.clone(), c.b.clone(), c.id.clone()))
                .collect()
        };
        for (a, b, chan) in pairs {
            let (x, y) = if a < b { (a, b) } else { (b, a) };
            let Some(addr) = addrs.get(&y).copied() else {
                continue;
            };
            let mut stream = TcpStream::connect(addr).await?;
            stream.set_nodelay(true)?;
            handshake_client(&mut stream, &x, &y, &channel_key(&psk, &chan)).await?;
            install(&shared, x, y, stream);
        }
        let deadline = Instant::now() + CONNECT_TIMEOUT;
        while shared.wires.lock().expect("wire lock").len() < expected {
            if Instant::now() > deadline {
                return Err(io::Error::new(
                    io::ErrorKind::TimedOut,
                    "channels did not come up",
                ));
            }
            tokio::time::sleep(Duration::from_millis(2)).await;
        }

        let mut net = SocketNet {
            shared: Arc::clone(&shared),
            tasks,
            addrs,
        };
        net.prefill(opts.prefill_bits);
        for (id, rx) in receivers {
            tokio::spawn(run_node(Arc::clone(&shared), id, rx));
        }
        for id in shared.nodes.keys() {
            shared.deliver(id, Input::Start);
        }
        let deadline = Instant::now() + CONNECT_TIMEOUT;
        while !net
            .with_node(
                &controller,
                |n| matches!(n, Node::Controller(c) if c.has_full_view()),
            )
            .unwrap_or(true)
        {
            if Instant::now() > deadline {
                return Err(io::Error::new(
                    io::ErrorKind::TimedOut,
                    "controller never saw every link",
                ));
            }
            tokio::time::sleep(Duration::from_millis(2)).await;
        }
        let ticker = Arc::clone(&shared);
        let dt = opts.link_tick;
        net.tasks.push(tokio::spawn(async move {
            let mut every = tokio::time::interval(dt);
            every.tick().await;
            loop {
                every.tick().await;
                ticker.tick_links(dt);
            }
        }));
        Ok(net)
    }

    fn prefill(&self, bits: usize) {
        if bits == 0 {
            return;
        }
        let now = self.shared.now();
        let mut links = self.shared.links.lock().expect("link lock");
        for b in links.iter_mut() {
            let forward = b.link.prefill(bits, PREFILL_CHUNK_BITS, now);
            let backward = b.link.prefill(bits, PREFILL_CHUNK_BITS, now);
            let (a, z) = (b.kms_a.clone(), b.kms_b.clone());
            self.shared.with_pair(&a, &z, |sa, sz| {
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
            });
        }
    }

    pub fn now(&self) -> SimTime {
        self.shared.now()
    }

    pub fn addr(&self, id: &EntityId) -> Option<SocketAddr> {
        self.addrs.get(id).copied()
    }

    pub fn command(&self, to: &EntityId, cmd: Command) {
        self.shared.deliver(to, Input::Command(cmd));
    }

    pub fn new_correlation(&self) -> CorrelationId {
        CorrelationId::random(&mut *self.shared.ids.lock().expect("id lock"))
    }

    pub fn start_exchange(
        &self,
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

    /// Submits a key delivery API request on behalf of `sae` and waits for
    /// the answer.
    pub async fn api_request(
        &self,
        sae: &EntityId,
        request: KeyRequest,
        timeout: Duration,
    ) -> ApiResult {
        let request_id = self.shared.next_request.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = oneshot::channel();
        self.shared
            .waiters
            .lock()
            .expect("waiter lock")
            .insert(request_id, tx);
        let corr = self.new_correlation();
        self.command(
            sae,
            Command::Api {
                request_id,
                corr,
                request,
            },
        );
        match tokio::time::timeout(timeout, rx).await {
            Ok(Ok(r)) => r,
            _ => {
                self.shared
                    .waiters
                    .lock()
                    .expect("waiter lock")
                    .remove(&request_id);
                Err(ErrorReport::new(ErrorCode::Timeout))
            }
        }
    }

    /// Reads a component's state.
    pub fn with_node<R>(&self, id: &EntityId, f: impl FnOnce(&Node) -> R) -> Option<R> {
        self.shared
            .nodes
            .get(id)
            .map(|n| f(&n.lock().expect("node lock")))
    }

    /// Mutates a component outside the message flow, e.g. to install a
    /// profile. Prefer [`SocketNet::command`] where a command exists.
    pub fn with_node_mut<R>(&self, id: &EntityId, f: impl FnOnce(&mut Node) -> R) -> Option<R> {
        self.shared
            .nodes
            .get(id)
            .map(|n| f(&mut n.lock().expect("node lock")))
    }

    pub fn node_ids(&self) -> Vec<EntityId> {
        self.shared.nodes.keys().cloned().collect()
    }

    pub fn set_link_state(&self, link_id: &str, up: bool) -> bool {
        let (a, z) = {
            let mut links = self.shared.links.lock().expect("link lock");
            let Some(b) = links.iter_mut().find(|b| b.link.link_id() == link_id) else {
                return false;
            };
            let state = if up { LinkStatus::Up } else { LinkStatus::Down };
            if !b.link.set_state(state) {
                return true;
            }
            (b.kms_a.clone(), b.kms_b.clone())
        };
        self.shared
            .channels
            .lock()
            .expect("channel lock")
            .set_up(&a, &z, up);
        for (me, peer) in [(&a, &z), (&z, &a)] {
            self.shared.deliver(
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

    /// Link ids with their current state.
    pub fn link_states(&self) -> Vec<(String, LinkStatus)> {
        let links = self.shared.links.lock().expect("link lock");
        links
            .iter()
            .map(|b| (b.link.link_id().to_string(), b.link.state()))
            .collect()
    }

    pub fn channels(&self) -> ChannelRegistry {
        self.shared.channels.lock().expect("channel lock").clone()
    }

    pub fn stats(&self) -> FabricStats {
        self.shared.stats.lock().expect("stats lock").clone()
    }

    pub fn telemetry(&self) -> Vec<Telemetry> {
        self.shared
            .telemetry
            .lock()
            .expect("telemetry lock")
            .clone()
    }

    pub fn trace_lines(&self) -> Vec<String> {
        self.shared
            .trace
            .lock()
            .expect("trace lock")
            .lines()
            .to_vec()
    }

    pub fn flush_trace(&self) -> io::Result<()> {
        self.shared.trace.lock().expect("trace lock").flush()
    }

    /// Stops listeners and the link clock. Component tasks end once their
    /// connections close.
    pub fn shutdown(&self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Drop for SocketNet {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn run_node(shared: Arc<Shared>, id: EntityId, mut rx: mpsc::UnboundedReceiver<Input>) {
    while let Some(input) = rx.recv().await {
        let Some(node) = shared.nodes.get(&id) else {
            return;
        };
        let mut ctx = Ctx::new(id.clone(), shared.now());
        node.lock().expect("node lock").handle(input, &mut ctx);
        shared.apply(ctx);
    }
}

async fn accept_loop(shared: Arc<Shared>, me: EntityId, listener: TcpListener, psk: Arc<Vec<u8>>) {
    loop {
        let Ok((mut stream, _)) = listener.accept().await else {
            continue;
        };
        let shared = Arc::clone(&shared);
        let me = me.clone();
        let psk = Arc::clone(&psk);
        tokio::spawn(async move {
            let _ = stream.set_nodelay(true);
            let key_for = |peer: &EntityId| {
                let channels = shared.channels.lock().expect("channel lock");
                channels.lookup(&me, peer).map(|c| channel_key(&psk, &c.id))
            };
            let handshake =
                tokio::time::timeout(CONNECT_TIMEOUT, handshake_server(&mut stream, &me, key_for))
                    .await;
            if let Ok(Ok(peer)) = handshake {
                install(&shared, me, peer, stream);
            }
        });
    }
}

/// Wires an authenticated connection between `me` and `peer`: a writer for
/// `me -> peer` and a reader for `peer -> me`.
fn install(shared: &Arc<Shared>, me: EntityId, peer: EntityId, stream: TcpStream) {
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<ProtocolMessage>();
    shared
        .wires
        .lock()
        .expect("wire lock")
        .insert((me.clone(), peer.clone()), tx);
    tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if write_message(&mut wr, &msg).await.is_err() {
                return;
            }
        }
    });
    let shared = Arc::clone(shared);
    tokio::spawn(async move {
        while let Ok(Some(msg)) = read_message(&mut rd).await {
            // the authenticated peer may only speak for itself
            if msg.from != peer || msg.to != me {
                continue;
            }
            shared.deliver(&me, Input::Message(msg));
        }
    });
}
