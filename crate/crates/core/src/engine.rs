//! Plumbing shared by every component: inputs, timers and the context a
//! component writes its outputs into.
//!
//! Components are plain state machines. A backend feeds them [`Input`]s and
//! carries out whatever they left in the [`Ctx`]: messages to send, timers
//! to arm, notifications to pass between SAEs.

use std::time::Duration;

use crate::aaa_manager::{Aaa, Manager, UserProfile};
use crate::controller::Controller;
use crate::domain::{
    AlarmKind, AlarmReport, CorrelationId, DeliveredKey, EntityId, ErrorCode, ErrorReport, KeyId,
    KeyRequest, KeyRole, KeyStore, LinkId, Payload, ProtocolMessage, Severity, SimTime,
};
use crate::kms_akms::Akms;
use crate::kms_ckms::Ckms;
use crate::kms_ukms::Ukms;
use crate::sae::Sae;

/// Correlation id used by messages that belong to no key exchange.
pub const NO_CORRELATION: CorrelationId = CorrelationId::NIL;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Timer {
    StatusPush,
    Heartbeat,
    HeartbeatCheck,
    AaaRetry { corr: CorrelationId, attempt: u32 },
    PeerRetry { corr: CorrelationId, attempt: u32 },
    SessionDeadline { corr: CorrelationId },
    KeyWait { corr: CorrelationId },
    InstallStep { install_id: u64, step: usize },
    SaeRetry { corr: CorrelationId },
    SaeDeadline { corr: CorrelationId },
}

/// Out-of-band message from the master SAE telling the slave which keys to
/// collect.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SaeNotify {
    pub corr: CorrelationId,
    pub master: EntityId,
    pub slave: EntityId,
    pub key_ids: Vec<KeyId>,
}

/// Instructions from the harness or an operator, outside the protocol.
#[derive(Clone, Debug)]
pub enum Command {
    /// Master SAE starts one key exchange.
    StartExchange {
        corr: CorrelationId,
        slave: EntityId,
        number: u32,
        size_bits: u32,
    },
    Notify(SaeNotify),
    /// A request arriving through the key delivery API.
    Api {
        request_id: u64,
        corr: CorrelationId,
        request: KeyRequest,
    },
    InjectRngFailure,
    PutProfile(UserProfile),
    /// Sends an arbitrary payload; used by policy audits to probe channels.
    Probe {
        to: EntityId,
        body: Payload,
    },
}

#[derive(Clone, Debug)]
pub enum Input {
    /// Delivered once when the component boots.
    Start,
    Message(ProtocolMessage),
    Timer(Timer),
    /// New KMA material arrived in the pools shared with `peer`.
    KeysRefilled {
        peer: EntityId,
    },
    LinkState {
        link_id: LinkId,
        peer: EntityId,
        up: bool,
    },
    /// A message this component sent was refused by the fabric.
    Undeliverable {
        msg: ProtocolMessage,
        reason: ErrorCode,
    },
    Command(Command),
}

#[derive(Clone, Debug)]
pub struct Outgoing {
    pub to: EntityId,
    pub corr: CorrelationId,
    pub body: Payload,
}

/// Key material a component held, reported for audits.
#[derive(Clone, Debug)]
pub struct Observation {
    pub role: KeyRole,
    pub key_id: KeyId,
    pub octets: Vec<u8>,
}

#[derive(Clone, Debug)]
pub enum ActorEvent {
    ApiResponse {
        request_id: u64,
        result: Result<Vec<DeliveredKey>, ErrorReport>,
    },
}

/// Everything one `handle` call produced.
#[derive(Debug)]
pub struct Ctx {
    pub now: SimTime,
    pub me: EntityId,
    pub out: Vec<Outgoing>,
    pub timers: Vec<(Duration, Timer)>,
    pub observations: Vec<Observation>,
    pub notifies: Vec<SaeNotify>,
    pub events: Vec<ActorEvent>,
}

impl Ctx {
    pub fn new(me: EntityId, now: SimTime) -> Self {
        Self {
            now,
            me,
            out: Vec::new(),
            timers: Vec::new(),
            observations: Vec::new(),
            notifies: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn send(&mut self, to: &EntityId, corr: CorrelationId, body: Payload) {
        self.out.push(Outgoing {
            to: to.clone(),
            corr,
            body,
        });
    }

    pub fn error(&mut self, to: &EntityId, corr: CorrelationId, code: ErrorCode) {
        self.send(to, corr, Payload::Error(ErrorReport::new(code)));
    }

    pub fn alarm(
        &mut self,
        to: &EntityId,
        severity: Severity,
        kind: AlarmKind,
        subject: Option<String>,
    ) {
        self.send(
            to,
            NO_CORRELATION,
            Payload::Alarm(AlarmReport {
                severity,
                kind,
                subject,
            }),
        );
    }

    pub fn after(&mut self, delay: Duration, timer: Timer) {
        self.timers.push((delay, timer));
    }

    pub fn observe(&mut self, role: KeyRole, key_id: KeyId, octets: &[u8]) {
        self.observations.push(Observation {
            role,
            key_id,
            octets: octets.to_vec(),
        });
    }
}

/// Every kind of component a backend can drive.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Node {
    Sae(Sae),
    Ukms(Ukms),
    Akms(Akms),
    Ckms(Ckms),
    Controller(Controller),
    Aaa(Aaa),
    Manager(Manager),
}

impl Node {
    pub fn id(&self) -> &EntityId {
        match self {
            Node::Sae(n) => n.id(),
            Node::Ukms(n) => n.id(),
            Node::Akms(n) => n.id(),
            Node::Ckms(n) => n.id(),
            Node::Controller(n) => n.id(),
            Node::Aaa(n) => n.id(),
            Node::Manager(n) => n.id(),
        }
    }

    pub fn handle(&mut self, input: Input, ctx: &mut Ctx) {
        match self {
            Node::Sae(n) => n.handle(input, ctx),
            Node::Ukms(n) => n.handle(input, ctx),
            Node::Akms(n) => n.handle(input, ctx),
            Node::Ckms(n) => n.handle(input, ctx),
            Node::Controller(n) => n.handle(input, ctx),
            Node::Aaa(n) => n.handle(input, ctx),
            Node::Manager(n) => n.handle(input, ctx),
        }
    }

    /// The KMA store fed by QKD links, for components that have one.
    pub fn store(&self) -> Option<&KeyStore> {
        match self {
            Node::Ukms(n) => Some(n.store()),
            Node::Akms(n) => Some(n.store()),
            Node::Ckms(n) => Some(n.store()),
            _ => None,
        }
    }

    pub fn store_mut(&mut self) -> Option<&mut KeyStore> {
        match self {
            Node::Ukms(n) => Some(n.store_mut()),
            Node::Akms(n) => Some(n.store_mut()),
            Node::Ckms(n) => Some(n.store_mut()),
            _ => None,
        }
    }
}
