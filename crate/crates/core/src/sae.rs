//! Secure application entity client: requests keys as master, collects
//! them as slave after an out-of-band notify, and records every exchange.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::Serialize;

use crate::domain::{
    CorrelationId, DeliveredKey, EntityId, ErrorCode, ErrorReport, KeyRequest, Payload,
    ProtocolMessage, SimTime,
};
use crate::engine::{ActorEvent, Command, Ctx, Input, SaeNotify, Timer};

/// How long a slave keeps polling for its keys.
pub const SLAVE_DEADLINE: Duration = Duration::from_secs(10);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SaeRole {
    Master,
    Slave,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExchangeRecord {
    pub corr: CorrelationId,
    pub role: SaeRole,
    pub peer: EntityId,
    pub started_at: SimTime,
    pub completed_at: Option<SimTime>,
    #[serde(skip)]
    pub keys: Vec<DeliveredKey>,
    pub outcome: Option<Result<(), ErrorCode>>,
    pub polls: u32,
}

impl ExchangeRecord {
    pub fn succeeded(&self) -> bool {
        matches!(self.outcome, Some(Ok(())))
    }
}

#[derive(Debug)]
pub struct Sae {
    id: EntityId,
    ukms: EntityId,
    exchanges: BTreeMap<CorrelationId, ExchangeRecord>,
    /// Outstanding requests made through the key delivery API.
    api: BTreeMap<CorrelationId, u64>,
    dec_requests: BTreeMap<CorrelationId, KeyRequest>,
}

impl Sae {
    pub fn new(id: EntityId, ukms: EntityId) -> Self {
        Self {
            id,
            ukms,
            exchanges: BTreeMap::new(),
            api: BTreeMap::new(),
            dec_requests: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &EntityId {
        &self.id
    }

    pub fn ukms(&self) -> &EntityId {
        &self.ukms
    }

    pub fn exchange(&self, corr: &CorrelationId) -> Option<&ExchangeRecord> {
        self.exchanges.get(corr)
    }

    pub fn exchanges(&self) -> impl Iterator<Item = &ExchangeRecord> {
        self.exchanges.values()
    }

    pub fn handle(&mut self, input: Input, ctx: &mut Ctx) {
        match input {
            Input::Command(Command::StartExchange {
                corr,
                slave,
                number,
                size_bits,
            }) => {
                self.exchanges.insert(
                    corr,
                    ExchangeRecord {
                        corr,
                        role: SaeRole::Master,
                        peer: slave.clone(),
                        started_at: ctx.now,
                        completed_at: None,
                        keys: Vec::new(),
                        outcome: None,
                        polls: 0,
                    },
                );
                let ukms = self.ukms.clone();
                ctx.send(
                    &ukms,
                    corr,
                    Payload::KeyRequest(KeyRequest::EncKeys {
                        slave_sae: slave,
                        number,
                        size_bits,
                    }),
                );
            }
            Input::Command(Command::Notify(n)) => self.on_notify(n, ctx),
            Input::Command(Command::Api {
                request_id,
                corr,
                request,
            }) => {
                self.api.insert(corr, request_id);
                let ukms = self.ukms.clone();
                ctx.send(&ukms, corr, Payload::KeyRequest(request));
            }
            Input::Timer(Timer::SaeRetry { corr }) => {
                let live = self
                    .exchanges
                    .get(&corr)
                    .is_some_and(|e| e.outcome.is_none());
                if let (true, Some(req)) = (live, self.dec_requests.get(&corr)) {
                    let ukms = self.ukms.clone();
                    ctx.send(&ukms, corr, Payload::KeyRequest(req.clone()));
                }
            }
            Input::Timer(Timer::SaeDeadline { corr }) => {
                if let Some(e) = self.exchanges.get_mut(&corr) {
                    if e.outcome.is_none() {
                        e.outcome = Some(Err(ErrorCode::Timeout));
                    }
                }
                self.dec_requests.remove(&corr);
            }
            Input::Message(msg) => self.on_message(msg, ctx),
            Input::Undeliverable { msg, reason } => {
                self.finish(msg.correlation_id, Err(reason), ctx)
            }
            _ => {}
        }
    }

    fn on_notify(&mut self, n: SaeNotify, ctx: &mut Ctx) {
        self.exchanges.insert(
            n.corr,
            ExchangeRecord {
                corr: n.corr,
                role: SaeRole::Slave,
                peer: n.master.clone(),
                started_at: ctx.now,
                completed_at: None,
                keys: Vec::new(),
                outcome: None,
                polls: 1,
            },
        );
        let req = KeyRequest::DecKeys {
            master_sae: n.master,
            key_ids: n.key_ids,
        };
        self.dec_requests.insert(n.corr, req.clone());
        let ukms = self.ukms.clone();
        ctx.send(&ukms, n.corr, Payload::KeyRequest(req));
        ctx.after(SLAVE_DEADLINE, Timer::SaeDeadline { corr: n.corr });
    }

    fn on_message(&mut self, msg: ProtocolMessage, ctx: &mut Ctx) {
        if msg.from != self.ukms {
            return;
        }
        let corr = msg.correlation_id;
        if let Some(request_id) = self.api.remove(&corr) {
            let result = match msg.body {
                Payload::KsaDeliver(d) => Ok(d.keys),
                Payload::Error(e) => Err(e),
                _ => return,
            };
            ctx.events
                .push(ActorEvent::ApiResponse { request_id, result });
            return;
        }
        match msg.body {
            Payload::KsaDeliver(d) => {
                let Some(e) = self.exchanges.get_mut(&corr) else {
                    return;
                };
                if e.outcome.is_some() {
                    return;
                }
                e.keys = d.keys;
                if e.role == SaeRole::Master {
                    ctx.notifies.push(SaeNotify {
                        corr,
                        master: self.id.clone(),
                        slave: e.peer.clone(),
                        key_ids: e.keys.iter().map(|k| k.key_id).collect(),
                    });
                }
                self.finish(corr, Ok(()), ctx);
            }
            Payload::Error(ErrorReport {
                code: ErrorCode::NotReady,
                retry_after_ms,
            }) => {
                if let Some(e) = self.exchanges.get_mut(&corr) {
                    if e.outcome.is_none() && e.role == SaeRole::Slave {
                        e.polls += 1;
                        let wait = Duration::from_millis(retry_after_ms.unwrap_or(10).max(1));
                        ctx.after(wait, Timer::SaeRetry { corr });
                    }
                }
            }
            Payload::Error(e) => self.finish(corr, Err(e.code), ctx),
            _ => {}
        }
    }

    fn finish(&mut self, corr: CorrelationId, outcome: Result<(), ErrorCode>, ctx: &mut Ctx) {
        if let Some(e) = self.exchanges.get_mut(&corr) {
            if e.outcome.is_none() {
                e.outcome = Some(outcome);
                e.completed_at = Some(ctx.now);
            }
        }
        self.dec_requests.remove(&corr);
    }
}
