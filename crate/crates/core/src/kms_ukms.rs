//! User-node KMS: the key-delivery boundary for SAEs. Forwards enriched
//! requests to its AKMS, receives KSA keys and hands them out.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::crypto_relay::{ChannelCipher, CipherMode, GcmChannel, PoolHandle};
use crate::domain::{
    AlarmKind, CorrelationId, DeliveredKey, EnrichedRequest, EntityId, EntityKind, ErrorCode,
    ErrorReport, KeyId, KeyRequest, KeyRole, KeyStore, KsaAck, KsaBundle, KsaDeliver, Payload,
    PoolKey, ProtocolMessage, SaeRequest, Severity,
};
use crate::engine::{Ctx, Input};

pub const MIN_KEY_BITS: u32 = 64;
pub const MAX_KEY_BITS: u32 = 4096;

#[derive(Clone, Copy, Debug)]
pub struct UkmsParams {
    /// READY keys held per SAE pair ahead of the slave's request.
    pub prebuffer: usize,
    pub access_cipher: CipherMode,
    pub gcm_rekey_after: u64,
    /// Hint returned with NOT_READY.
    pub retry_after_ms: u64,
}

/// Checks number and size of an enc_keys request.
pub fn validate_request(number: u32, size_bits: u32) -> Result<(), ErrorCode> {
    if number == 0
        || !(MIN_KEY_BITS..=MAX_KEY_BITS).contains(&size_bits)
        || !size_bits.is_multiple_of(8)
    {
        return Err(ErrorCode::OversizeRequest);
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct KeyStatus {
    pub stored_key_count: usize,
    pub key_size: u32,
    pub max_key_count: usize,
}

#[derive(Debug)]
struct Ready {
    key_id: KeyId,
    octets: Vec<u8>,
}

type Pair = (EntityId, EntityId);

#[derive(Debug)]
pub struct Ukms {
    id: EntityId,
    akms: EntityId,
    store: KeyStore,
    inbound: ChannelCipher,
    params: UkmsParams,
    /// Registered SAEs and the account each belongs to.
    saes: BTreeMap<EntityId, String>,
    /// Master-side exchanges waiting for their KSA push.
    pending: BTreeMap<CorrelationId, EntityId>,
    requests_seen: BTreeSet<CorrelationId>,
    pushes_seen: BTreeSet<CorrelationId>,
    buffers: BTreeMap<Pair, VecDeque<Ready>>,
    /// Owner pair of every key this UKMS has held as slave side.
    owners: BTreeMap<KeyId, Pair>,
    delivered: BTreeSet<KeyId>,
    key_size: BTreeMap<Pair, u32>,
}

impl Ukms {
    pub fn new(
        id: EntityId,
        akms: EntityId,
        store: KeyStore,
        saes: BTreeMap<EntityId, String>,
        params: UkmsParams,
    ) -> Self {
        let inbound = match params.access_cipher {
            CipherMode::Otp => ChannelCipher::Otp,
            CipherMode::Aes256Gcm => ChannelCipher::Gcm(GcmChannel::new(params.gcm_rekey_after)),
        };
        Self {
            id,
            akms,
            store,
            inbound,
            params,
            saes,
            pending: BTreeMap::new(),
            requests_seen: BTreeSet::new(),
            pushes_seen: BTreeSet::new(),
            buffers: BTreeMap::new(),
            owners: BTreeMap::new(),
            delivered: BTreeSet::new(),
            key_size: BTreeMap::new(),
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

    pub fn serves(&self, sae: &EntityId) -> bool {
        self.saes.contains_key(sae)
    }

    /// Buffered keys waiting for `slave` from `master`.
    pub fn status(&self, master: &EntityId, slave: &EntityId) -> KeyStatus {
        let pair = (master.clone(), slave.clone());
        KeyStatus {
            stored_key_count: self.buffers.get(&pair).map_or(0, VecDeque::len),
            key_size: self
                .key_size
                .get(&pair)
                .copied()
                .unwrap_or(crate::domain::DEFAULT_KEY_BITS),
            max_key_count: self.params.prebuffer,
        }
    }

    pub fn buffered(&self) -> usize {
        self.buffers.values().map(VecDeque::len).sum()
    }

    pub fn handle(&mut self, input: Input, ctx: &mut Ctx) {
        if let Input::Message(msg) = input {
            self.on_message(msg, ctx);
        }
    }

    fn on_message(&mut self, msg: ProtocolMessage, ctx: &mut Ctx) {
        let corr = msg.correlation_id;
        match msg.body {
            Payload::KeyRequest(r) if msg.from.kind() == EntityKind::Sae => {
                if !self.saes.contains_key(&msg.from) {
                    ctx.error(&msg.from, corr, ErrorCode::UnknownSae);
                    return;
                }
                match r {
                    KeyRequest::EncKeys {
                        slave_sae,
                        number,
                        size_bits,
                    } => self.enc_keys(msg.from, corr, slave_sae, number, size_bits, ctx),
                    KeyRequest::DecKeys {
                        master_sae,
                        key_ids,
                    } => self.dec_keys(msg.from, corr, master_sae, key_ids, ctx),
                }
            }
            Payload::KsaPush(b) if msg.from == self.akms => self.on_push(corr, b, ctx),
            Payload::Error(e) if msg.from == self.akms => {
                if let Some(master) = self.pending.remove(&corr) {
                    ctx.send(&master, corr, Payload::Error(e));
                }
            }
            _ => {}
        }
    }

    fn enc_keys(
        &mut self,
        master: EntityId,
        corr: CorrelationId,
        slave: EntityId,
        number: u32,
        size_bits: u32,
        ctx: &mut Ctx,
    ) {
        if let Err(code) = validate_request(number, size_bits) {
            ctx.error(&master, corr, code);
            return;
        }
        if !self.requests_seen.insert(corr) {
            ctx.error(&master, corr, ErrorCode::DuplicateRequest);
            return;
        }
        let account = self.saes[&master].clone();
        self.pending.insert(corr, master.clone());
        let inner = SaeRequest {
            master_sae: master,
            slave_sae: slave,
            number,
            size_bits,
            correlation_id: corr,
        };
        let akms = self.akms.clone();
        ctx.send(
            &akms,
            corr,
            Payload::EnrichedRequest(EnrichedRequest {
                inner,
                user_account: account,
                ukms_id: self.id.clone(),
            }),
        );
    }

    fn dec_keys(
        &mut self,
        slave: EntityId,
        corr: CorrelationId,
        master: EntityId,
        key_ids: Vec<KeyId>,
        ctx: &mut Ctx,
    ) {
        if key_ids.is_empty() {
            ctx.error(&slave, corr, ErrorCode::SchemaViolation);
            return;
        }
        let pair = (master, slave.clone());
        if key_ids
            .iter()
            .any(|k| self.owners.get(k).is_some_and(|owner| owner != &pair))
        {
            ctx.error(&slave, corr, ErrorCode::Forbidden);
            return;
        }
        if key_ids.iter().any(|k| self.delivered.contains(k)) {
            ctx.error(&slave, corr, ErrorCode::NoSuchExchange);
            return;
        }
        if key_ids.iter().any(|k| !self.owners.contains_key(k)) {
            ctx.send(
                &slave,
                corr,
                Payload::Error(ErrorReport {
                    code: ErrorCode::NotReady,
                    retry_after_ms: Some(self.params.retry_after_ms),
                }),
            );
            return;
        }
        let buffer = self.buffers.entry(pair).or_default();
        let mut keys = Vec::with_capacity(key_ids.len());
        for k in &key_ids {
            if let Some(pos) = buffer.iter().position(|r| &r.key_id == k) {
                let r = buffer.remove(pos).expect("position is valid");
                keys.push(DeliveredKey::new(r.key_id, &r.octets));
            }
            self.delivered.insert(*k);
        }
        ctx.send(&slave, corr, Payload::KsaDeliver(KsaDeliver { keys }));
    }

    fn on_push(&mut self, corr: CorrelationId, b: KsaBundle, ctx: &mut Ctx) {
        let akms = self.akms.clone();
        if !self.pushes_seen.insert(corr) {
            // replayed push: acknowledge again, nothing is buffered twice
            ctx.send(&akms, corr, Payload::KsaAck(KsaAck { key_ids: b.key_ids }));
            return;
        }
        // unwrap even pushes we will refuse, so both ends of the pool stay aligned
        let mut src = PoolHandle::new(&mut self.store, PoolKey::inbound(akms.clone()), ctx.now);
        let plain = match self.inbound.unwrap(&b.wrapped, &mut src) {
            Ok(p) => p,
            Err(e) => {
                ctx.alarm(
                    &akms,
                    Severity::Critical,
                    AlarmKind::AuthFail,
                    Some(corr.to_string()),
                );
                ctx.error(&akms, corr, e.code());
                if let Some(master) = self.pending.remove(&corr) {
                    ctx.error(&master, corr, e.code());
                }
                return;
            }
        };
        let step = (b.size_bits / 8) as usize;
        if step == 0 || plain.len() != step * b.key_ids.len() {
            ctx.error(&akms, corr, ErrorCode::SchemaViolation);
            return;
        }
        let keys: Vec<(KeyId, Vec<u8>)> = b
            .key_ids
            .iter()
            .zip(plain.chunks(step))
            .map(|(id, k)| (*id, k.to_vec()))
            .collect();

        if let Some(master) = self.pending.remove(&corr) {
            for (id, k) in &keys {
                ctx.observe(KeyRole::Ksa, *id, k);
            }
            ctx.send(
                &akms,
                corr,
                Payload::KsaAck(KsaAck {
                    key_ids: b.key_ids.clone(),
                }),
            );
            let delivered = keys
                .iter()
                .map(|(id, k)| DeliveredKey::new(*id, k))
                .collect();
            ctx.send(
                &master,
                corr,
                Payload::KsaDeliver(KsaDeliver { keys: delivered }),
            );
            return;
        }
        if !self.saes.contains_key(&b.slave_sae) {
            ctx.alarm(
                &akms,
                Severity::Warn,
                AlarmKind::NoSuchExchange,
                Some(corr.to_string()),
            );
            ctx.error(&akms, corr, ErrorCode::NoSuchExchange);
            return;
        }
        let pair = (b.master_sae.clone(), b.slave_sae.clone());
        let buffer = self.buffers.entry(pair.clone()).or_default();
        if buffer.len() + keys.len() > self.params.prebuffer {
            ctx.error(&akms, corr, ErrorCode::BufferFull);
            return;
        }
        for (id, k) in keys {
            ctx.observe(KeyRole::Ksa, id, &k);
            self.owners.insert(id, pair.clone());
            buffer.push_back(Ready {
                key_id: id,
                octets: k,
            });
        }
        self.key_size.insert(pair, b.size_bits);
        ctx.send(&akms, corr, Payload::KsaAck(KsaAck { key_ids: b.key_ids }));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto_relay::CipherMode;
    use crate::domain::{BitString, KeyBlock, KeyOrigin, MsgId, SimTime};
    use crate::qkd_link_sim::deliver_directed;

    fn params() -> UkmsParams {
        UkmsParams {
            prebuffer: 2,
            access_cipher: CipherMode::Otp,
            gcm_rekey_after: 1 << 20,
            retry_after_ms: 10,
        }
    }

    fn sae(n: &str) -> EntityId {
        EntityId::sae(n)
    }

    fn ukms() -> (Ukms, KeyStore) {
        let id = EntityId::ukms("node-15");
        let akms = EntityId::akms("node-14");
        let mut mine = KeyStore::new(id.clone(), 1 << 20, 0);
        let mut theirs = KeyStore::new(akms.clone(), 1 << 20, 0);
        let blocks = (0..16u8)
            .map(|i| {
                KeyBlock::with_id(
                    KeyId::from_bytes([i; 16]),
                    BitString::from_octets(vec![i.wrapping_mul(31); 32]),
                    KeyOrigin::QkdLink("14-15".into()),
                    KeyRole::Kma,
                    SimTime::ZERO,
                )
                .unwrap()
            })
            .collect();
        deliver_directed(
            &mut theirs,
            &PoolKey::outbound(id.clone()),
            &mut mine,
            &PoolKey::inbound(akms.clone()),
            blocks,
        );
        let saes = [(sae("sae-b"), "acct-1".to_string())].into_iter().collect();
        (Ukms::new(id, akms, mine, saes, params()), theirs)
    }

    fn c(i: u8) -> CorrelationId {
        CorrelationId::from_bytes([i; 16])
    }

    fn input(from: EntityId, corr: CorrelationId, body: Payload) -> Input {
        Input::Message(ProtocolMessage::new(
            MsgId::NIL,
            corr,
            from,
            EntityId::ukms("node-15"),
            body,
        ))
    }

    fn step(u: &mut Ukms, i: Input) -> Ctx {
        let mut ctx = Ctx::new(u.id.clone(), SimTime::ZERO);
        u.handle(i, &mut ctx);
        ctx
    }

    /// Bundle wrapped by the AKMS end of the leg.
    fn bundle(
        akms_store: &mut KeyStore,
        master: &str,
        slave: &str,
        ids: &[u8],
    ) -> (KsaBundle, Vec<u8>) {
        let plain: Vec<u8> = ids.iter().flat_map(|i| vec![*i; 32]).collect();
        let bits = plain.len() * 8;
        let mut src = PoolHandle::new(
            akms_store,
            PoolKey::outbound(EntityId::ukms("node-15")),
            SimTime::ZERO,
        );
        let wrapped = ChannelCipher::Otp
            .wrap_bytes(&plain, bits, &mut src)
            .unwrap();
        (
            KsaBundle {
                master_sae: sae(master),
                slave_sae: sae(slave),
                key_ids: ids
                    .iter()
                    .map(|i| KeyId::from_bytes([*i + 100; 16]))
                    .collect(),
                size_bits: 256,
                wrapped,
            },
            plain,
        )
    }

    #[test]
    fn request_validation() {
        assert_eq!(validate_request(0, 256), Err(ErrorCode::OversizeRequest));
        assert_eq!(validate_request(1, 32), Err(ErrorCode::OversizeRequest));
        assert_eq!(validate_request(1, 8192), Err(ErrorCode::OversizeRequest));
        assert_eq!(validate_request(1, 260), Err(ErrorCode::OversizeRequest));
        assert!(validate_request(1, 64).is_ok());
        assert!(validate_request(3, 4096).is_ok());
    }

    #[test]
    fn enc_keys_is_enriched_with_the_account() {
        let (mut u, _) = ukms();
        let ctx = step(
            &mut u,
            input(
                sae("sae-b"),
                c(1),
                Payload::KeyRequest(KeyRequest::EncKeys {
                    slave_sae: sae("sae-a"),
                    number: 1,
                    size_bits: 256,
                }),
            ),
        );
        match &ctx.out[0].body {
            Payload::EnrichedRequest(e) => {
                assert_eq!(e.user_account, "acct-1");
                assert_eq!(e.inner.master_sae, sae("sae-b"));
            }
            other => panic!("{other:?}"),
        }
        let dup = step(
            &mut u,
            input(
                sae("sae-b"),
                c(1),
                Payload::KeyRequest(KeyRequest::EncKeys {
                    slave_sae: sae("sae-a"),
                    number: 1,
                    size_bits: 256,
                }),
            ),
        );
        assert!(
            matches!(&dup.out[0].body, Payload::Error(e) if e.code == ErrorCode::DuplicateRequest)
        );
    }

    #[test]
    fn unknown_sae_is_refused() {
        let (mut u, _) = ukms();
        let ctx = step(
            &mut u,
            input(
                sae("sae-x"),
                c(1),
                Payload::KeyRequest(KeyRequest::EncKeys {
                    slave_sae: sae("sae-a"),
                    number: 1,
                    size_bits: 256,
                }),
            ),
        );
        assert!(matches!(&ctx.out[0].body, Payload::Error(e) if e.code == ErrorCode::UnknownSae));
    }

    #[test]
    fn slave_side_buffers_then_delivers_once() {
        let (mut u, mut akms) = ukms();
        let (b, plain) = bundle(&mut akms, "sae-a", "sae-b", &[1]);
        let ids = b.key_ids.clone();
        let dec = |ids: Vec<KeyId>, who: &str| {
            input(
                sae(who),
                c(9),
                Payload::KeyRequest(KeyRequest::DecKeys {
                    master_sae: sae("sae-a"),
                    key_ids: ids,
                }),
            )
        };

        let early = step(&mut u, dec(ids.clone(), "sae-b"));
        assert!(matches!(
            &early.out[0].body,
            Payload::Error(ErrorReport {
                code: ErrorCode::NotReady,
                retry_after_ms: Some(10)
            })
        ));

        let ctx = step(
            &mut u,
            input(EntityId::akms("node-14"), c(1), Payload::KsaPush(b.clone())),
        );
        assert!(matches!(ctx.out[0].body, Payload::KsaAck(_)));
        // a replayed push is acknowledged but not buffered twice
        let replay = step(
            &mut u,
            input(EntityId::akms("node-14"), c(1), Payload::KsaPush(b)),
        );
        assert!(matches!(replay.out[0].body, Payload::KsaAck(_)));
        assert_eq!(u.buffered(), 1);
        assert_eq!(u.store.total_consumed_bits(), 384);

        let ctx = step(&mut u, dec(ids.clone(), "sae-b"));
        match &ctx.out[0].body {
            Payload::KsaDeliver(d) => assert_eq!(d.keys[0].octets(), plain),
            other => panic!("{other:?}"),
        }
        assert_eq!(u.buffered(), 0);
        let again = step(&mut u, dec(ids, "sae-b"));
        assert!(
            matches!(&again.out[0].body, Payload::Error(e) if e.code == ErrorCode::NoSuchExchange)
        );
    }

    #[test]
    fn another_pair_cannot_collect_the_key() {
        let (mut u, mut akms) = ukms();
        u.saes.insert(sae("sae-c"), "acct-2".into());
        let (b, _) = bundle(&mut akms, "sae-a", "sae-b", &[1]);
        let ids = b.key_ids.clone();
        step(
            &mut u,
            input(EntityId::akms("node-14"), c(1), Payload::KsaPush(b)),
        );
        let ctx = step(
            &mut u,
            input(
                sae("sae-c"),
                c(2),
                Payload::KeyRequest(KeyRequest::DecKeys {
                    master_sae: sae("sae-a"),
                    key_ids: ids,
                }),
            ),
        );
        assert!(matches!(&ctx.out[0].body, Payload::Error(e) if e.code == ErrorCode::Forbidden));
    }

    #[test]
    fn master_side_push_is_delivered_to_the_requester() {
        let (mut u, mut akms) = ukms();
        step(
            &mut u,
            input(
                sae("sae-b"),
                c(1),
                Payload::KeyRequest(KeyRequest::EncKeys {
                    slave_sae: sae("sae-a"),
                    number: 2,
                    size_bits: 256,
                }),
            ),
        );
        let (b, plain) = bundle(&mut akms, "sae-b", "sae-a", &[4, 5]);
        let ctx = step(
            &mut u,
            input(EntityId::akms("node-14"), c(1), Payload::KsaPush(b)),
        );
        let deliver = ctx.out.iter().find(|o| o.to == sae("sae-b")).unwrap();
        match &deliver.body {
            Payload::KsaDeliver(d) => {
                assert_eq!(d.keys.len(), 2);
                assert_eq!(d.keys[1].octets(), plain[32..].to_vec());
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(ctx.observations.len(), 2);
    }

    #[test]
    fn stray_push_alarms_through_the_akms() {
        let (mut u, mut akms) = ukms();
        let (b, _) = bundle(&mut akms, "sae-a", "sae-z", &[1]);
        let ctx = step(
            &mut u,
            input(EntityId::akms("node-14"), c(1), Payload::KsaPush(b)),
        );
        assert!(ctx.out.iter().all(|o| o.to == EntityId::akms("node-14")));
        assert!(ctx
            .out
            .iter()
            .any(|o| matches!(&o.body, Payload::Error(e) if e.code == ErrorCode::NoSuchExchange)));
        assert!(ctx.out.iter().any(|o| matches!(o.body, Payload::Alarm(_))));
    }

    #[test]
    fn prebuffer_is_capped() {
        let (mut u, mut akms) = ukms();
        for i in 0..3u8 {
            let (b, _) = bundle(&mut akms, "sae-a", "sae-b", &[i]);
            let ctx = step(
                &mut u,
                input(EntityId::akms("node-14"), c(i), Payload::KsaPush(b)),
            );
            if i < 2 {
                assert!(matches!(ctx.out[0].body, Payload::KsaAck(_)));
            } else {
                assert!(
                    matches!(&ctx.out[0].body, Payload::Error(e) if e.code == ErrorCode::BufferFull)
                );
            }
        }
        assert_eq!(u.status(&sae("sae-a"), &sae("sae-b")).stored_key_count, 2);
    }

    #[test]
    fn user_side_never_sends_key_material_up() {
        let (mut u, mut akms) = ukms();
        let mut all = Vec::new();
        all.extend(
            step(
                &mut u,
                input(
                    sae("sae-b"),
                    c(1),
                    Payload::KeyRequest(KeyRequest::EncKeys {
                        slave_sae: sae("sae-a"),
                        number: 1,
                        size_bits: 256,
                    }),
                ),
            )
            .out,
        );
        let (b, _) = bundle(&mut akms, "sae-a", "sae-b", &[1]);
        all.extend(
            step(
                &mut u,
                input(EntityId::akms("node-14"), c(2), Payload::KsaPush(b)),
            )
            .out,
        );
        assert!(all
            .iter()
            .filter(|o| o.to.kind() == EntityKind::Akms)
            .all(|o| o.body.asset_class() != crate::domain::AssetClass::KeyData));
    }
}
