//! Turns a [`TopologyConfig`] into running components: one node per
//! component, the channels between them and the QKD links feeding their
//! pools. Backend-independent.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::aaa_manager::{Aaa, AaaMode, Manager, TranslationEntry, UserProfile};
use crate::config::{CipherModes, NodeType, TopologyConfig};
use crate::controller::Controller;
use crate::crypto_relay::CipherMode;
use crate::domain::{EntityId, EntityKind, KeyStore, LinkId};
use crate::engine::Node;
use crate::kms_akms::{Akms, AkmsParams};
use crate::kms_ckms::{Ckms, CkmsParams};
use crate::kms_ukms::{Ukms, UkmsParams};
use crate::qkd_link_sim::{LinkError, QkdLink};
use crate::rng::HybridRng;
use crate::sae::Sae;
use crate::transport::{ChannelRegistry, ChannelSpec};

/// Retry hint handed to SAEs that ask for keys too early.
pub const NOT_READY_RETRY_MS: u64 = 10;

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("access node {0} must serve exactly one user node")]
    AccessFanout(String),
    #[error("topology has no datacenter node")]
    NoDatacenter,
    #[error("secret is not valid hex")]
    Secret,
}

/// Knobs that override the config for one run.
#[derive(Clone, Copy, Debug)]
pub struct DeployOptions {
    pub aaa_mode: AaaMode,
    /// Forces one cipher on every leg.
    pub cipher: Option<CipherMode>,
}

impl Default for DeployOptions {
    fn default() -> Self {
        Self {
            aaa_mode: AaaMode::Strict,
            cipher: None,
        }
    }
}

/// A QKD link and the two KMSs whose pools it fills.
#[derive(Debug)]
pub struct LinkBinding {
    pub link: QkdLink,
    pub kms_a: EntityId,
    pub kms_b: EntityId,
}

#[derive(Debug)]
pub struct Deployment {
    pub nodes: BTreeMap<EntityId, Node>,
    pub channels: ChannelRegistry,
    /// Sorted by link id, the order links tick in.
    pub links: Vec<LinkBinding>,
    pub controller: EntityId,
    pub manager: EntityId,
    pub aaa: EntityId,
    pub saes: Vec<EntityId>,
    pub ciphers: CipherModes,
}

impl Deployment {
    pub fn link(&self, id: &str) -> Option<&LinkBinding> {
        self.links.iter().find(|l| l.link.link_id() == id)
    }
}

/// Independent 64-bit seed for one component, from the run seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(0.0))
}

/// The KMS that terminates `node`'s end of a link towards `other`.
fn link_kms(cfg: &TopologyConfig, node: &str, other: &str) -> EntityId {
    let ty = |id: &str| cfg.node(id).map(|n| n.node_type);
    match (ty(node), ty(other)) {
        (Some(NodeType::User), _) => EntityId::ukms(node),
        (Some(NodeType::Access), Some(NodeType::User)) => EntityId::akms(node),
        _ => EntityId::ckms(node),
    }
}

pub fn deploy(cfg: &TopologyConfig, opts: &DeployOptions) -> Result<Deployment, DeployError> {
    let dc = cfg.datacenter().ok_or(DeployError::NoDatacenter)?;
    let controller = EntityId::controller(&dc.id);
    let manager = EntityId::manager(&dc.id);
    let aaa = EntityId::aaa(&dc.id);
    let ciphers = opts.cipher.map_or(cfg.cipher_modes, CipherModes::all);
    let k = &cfg.kms;
    let bootstrap = hex::decode(&cfg.secrets.bootstrap).map_err(|_| DeployError::Secret)?;
    let store =
        |owner: &EntityId| KeyStore::new(owner.clone(), k.pool_capacity_bits, k.low_watermark_bits);
    let status_interval = secs(k.status_interval_s);

    let mut nodes = BTreeMap::new();
    let mut insert = |n: Node| {
        nodes.insert(n.id().clone(), n);
    };

    let mut links = Vec::new();
    let mut carrier_links: Vec<(LinkId, EntityId, EntityId)> = Vec::new();
    let mut neighbors: BTreeMap<EntityId, Vec<(LinkId, EntityId, bool)>> = BTreeMap::new();
    let mut sorted: Vec<_> = cfg.links.iter().collect();
    sorted.sort_by(|x, y| x.id.cmp(&y.id));
    for l in sorted {
        let kms_a = link_kms(cfg, &l.a, &l.b);
        let kms_b = link_kms(cfg, &l.b, &l.a);
        let link = QkdLink::new(
            l.id.clone(),
            EntityId::qkd_module(&format!("{}:{}", l.a, l.id)),
            EntityId::qkd_module(&format!("{}:{}", l.b, l.id)),
            l.params(),
            l.initial_state,
            derive_seed(cfg.seed, &format!("link/{}", l.id)),
        )?;
        if kms_a.kind() == EntityKind::Ckms && kms_b.kind() == EntityKind::Ckms {
            let up = l.initial_state.is_up();
            carrier_links.push((l.id.clone(), kms_a.clone(), kms_b.clone()));
            neighbors
                .entry(kms_a.clone())
                .or_default()
                .push((l.id.clone(), kms_b.clone(), up));
            neighbors
                .entry(kms_b.clone())
                .or_default()
                .push((l.id.clone(), kms_a.clone(), up));
        }
        links.push(LinkBinding { link, kms_a, kms_b });
    }

    let mut saes = Vec::new();
    for s in &cfg.saes {
        let id = EntityId::sae(&s.id);
        insert(Node::Sae(Sae::new(id.clone(), EntityId::ukms(&s.node))));
        saes.push(id);
    }

    let mut monitored = BTreeSet::from([controller.clone(), aaa.clone()]);
    let mut directory = Vec::new();
    for n in &cfg.nodes {
        match n.node_type {
            NodeType::User => {
                let id = EntityId::ukms(&n.id);
                let access = cfg
                    .access_of(&n.id)
                    .expect("validated: user nodes hang off an access node");
                let served: BTreeMap<EntityId, String> = cfg
                    .saes
                    .iter()
                    .filter(|s| s.node == n.id)
                    .map(|s| (EntityId::sae(&s.id), s.account.clone()))
                    .collect();
                for sae in served.keys() {
                    directory.push(TranslationEntry {
                        sae: sae.clone(),
                        ukms: id.clone(),
                        akms: EntityId::akms(access),
                    });
                }
                let params = UkmsParams {
                    prebuffer: k.prebuffer_keys,
                    access_cipher: ciphers.access,
                    gcm_rekey_after: k.gcm_rekey_after,
                    retry_after_ms: NOT_READY_RETRY_MS,
                };
                insert(Node::Ukms(Ukms::new(
                    id.clone(),
                    EntityId::akms(access),
                    store(&id),
                    served,
                    params,
                )));
            }
            NodeType::Access => {
                let users: Vec<&str> = cfg
                    .nodes
                    .iter()
                    .filter(|u| {
                        u.node_type == NodeType::User && cfg.access_of(&u.id) == Some(n.id.as_str())
                    })
                    .map(|u| u.id.as_str())
                    .collect();
                let [user] = users.as_slice() else {
                    return Err(DeployError::AccessFanout(n.id.clone()));
                };
                let id = EntityId::akms(&n.id);
                let ckms = EntityId::ckms(&n.id);
                let params = AkmsParams {
                    retry_attempts: cfg.retry.attempts,
                    retry_base: Duration::from_millis(cfg.retry.base_ms),
                    session_timeout: secs(k.session_timeout_s),
                    max_sessions: k.max_sessions,
                    heartbeat_interval: status_interval,
                    access_cipher: ciphers.access,
                    peer_cipher: ciphers.peer,
                    gcm_rekey_after: k.gcm_rekey_after,
                };
                insert(Node::Akms(Akms::new(
                    id.clone(),
                    EntityId::ukms(user),
                    ckms.clone(),
                    aaa.clone(),
                    manager.clone(),
                    store(&id),
                    bootstrap.clone(),
                    HybridRng::simulated(derive_seed(cfg.seed, &format!("rng/{id}"))),
                    derive_seed(cfg.seed, &format!("ids/{id}")),
                    params,
                )));
                monitored.insert(id.clone());
                insert(Node::Ckms(carrier_kms(
                    cfg,
                    &ckms,
                    Some(id),
                    &controller,
                    &manager,
                    &mut neighbors,
                    store(&ckms),
                    ciphers,
                )));
                monitored.insert(ckms);
            }
            NodeType::Carrier => {
                let ckms = EntityId::ckms(&n.id);
                insert(Node::Ckms(carrier_kms(
                    cfg,
                    &ckms,
                    None,
                    &controller,
                    &manager,
                    &mut neighbors,
                    store(&ckms),
                    ciphers,
                )));
                monitored.insert(ckms);
            }
            NodeType::Datacenter => {}
        }
    }

    insert(Node::Controller(Controller::new(
        controller.clone(),
        manager.clone(),
        cfg.controller,
        status_interval,
        carrier_links,
    )));
    let profiles = cfg
        .profiles
        .iter()
        .map(|p| UserProfile {
            account_id: p.account_id.clone(),
            allowed_sae_pairs: p
                .allowed_sae_pairs
                .iter()
                .map(|(a, b)| (EntityId::sae(a), EntityId::sae(b)))
                .collect(),
            max_keys_per_day: p.max_keys_per_day,
            max_key_bits: p.max_key_bits,
            payment_valid: p.payment_valid,
        })
        .collect();
    insert(Node::Aaa(Aaa::new(
        aaa.clone(),
        manager.clone(),
        opts.aaa_mode,
        profiles,
        directory,
        status_interval,
    )));
    insert(Node::Manager(Manager::new(
        manager.clone(),
        controller.clone(),
        monitored.clone(),
        monitored,
        status_interval,
    )));

    let channels = build_channels(cfg, &nodes, &controller, &manager, &aaa);
    Ok(Deployment {
        nodes,
        channels,
        links,
        controller,
        manager,
        aaa,
        saes,
        ciphers,
    })
}

#[allow(clippy::too_many_arguments)]
fn carrier_kms(
    cfg: &TopologyConfig,
    id: &EntityId,
    akms: Option<EntityId>,
    controller: &EntityId,
    manager: &EntityId,
    neighbors: &mut BTreeMap<EntityId, Vec<(LinkId, EntityId, bool)>>,
    store: KeyStore,
    ciphers: CipherModes,
) -> Ckms {
    let params = CkmsParams {
        max_hops: cfg.kms.max_hops,
        key_wait: secs(cfg.kms.key_wait_timeout_s),
        status_interval: secs(cfg.kms.status_interval_s),
        cipher: ciphers.carrier,
        gcm_rekey_after: cfg.kms.gcm_rekey_after,
    };
    Ckms::new(
        id.clone(),
        akms,
        controller.clone(),
        manager.clone(),
        store,
        neighbors.remove(id).unwrap_or_default(),
        params,
    )
}

/// One channel per pair of components that talk, each with the class
/// ceiling and protections of its policy. Pairs without a policy get no
/// channel, so the fabric denies them.
fn build_channels(
    cfg: &TopologyConfig,
    nodes: &BTreeMap<EntityId, Node>,
    controller: &EntityId,
    manager: &EntityId,
    aaa: &EntityId,
) -> ChannelRegistry {
    let mut pairs: Vec<(EntityId, EntityId)> = Vec::new();
    for s in &cfg.saes {
        pairs.push((EntityId::sae(&s.id), EntityId::ukms(&s.node)));
    }
    for l in &cfg.links {
        pairs.push((link_kms(cfg, &l.a, &l.b), link_kms(cfg, &l.b, &l.a)));
    }
    let akms: Vec<&EntityId> = nodes
        .keys()
        .filter(|id| id.kind() == EntityKind::Akms)
        .collect();
    for (i, a) in akms.iter().enumerate() {
        pairs.push(((*a).clone(), EntityId::ckms(a.name())));
        pairs.push(((*a).clone(), aaa.clone()));
        for b in &akms[i + 1..] {
            pairs.push(((*a).clone(), (*b).clone()));
        }
    }
    for id in nodes.keys() {
        match id.kind() {
            EntityKind::Ckms => {
                pairs.push((id.clone(), controller.clone()));
                pairs.push((id.clone(), manager.clone()));
            }
            EntityKind::Akms | EntityKind::Controller | EntityKind::Aaa => {
                pairs.push((id.clone(), manager.clone()))
            }
            _ => {}
        }
    }

    let mut reg = ChannelRegistry::new();
    for (a, b) in pairs {
        let Some(policy) = cfg.policy_for(a.kind(), b.kind()) else {
            continue;
        };
        let link = cfg.links.iter().find(|l| {
            link_kms(cfg, &l.a, &l.b) == a && link_kms(cfg, &l.b, &l.a) == b
                || link_kms(cfg, &l.a, &l.b) == b && link_kms(cfg, &l.b, &l.a) == a
        });
        reg.insert(ChannelSpec {
            id: link.map_or_else(|| format!("{a}~{b}"), |l| l.id.clone()),
            a,
            b,
            kind: policy.kind,
            allowed: policy.classes.iter().copied().collect(),
            security: policy.property_set(),
            latency: policy.latency.unwrap_or(cfg.default_latency),
            up: link.is_none_or(|l| l.initial_state.is_up()),
        });
    }
    reg
}
