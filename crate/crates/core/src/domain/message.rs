use std::fmt;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{CorrelationId, EntityId, KeyId, LinkId, MsgId};
use crate::crypto_relay::WrappedKey;

/// Information-asset category of a message; decides which channel
/// protections it needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AssetClass {
    KeyData,
    MetaData,
    ControlMgmt,
    UserProfile,
}

impl AssetClass {
    pub const ALL: [AssetClass; 4] = [
        AssetClass::KeyData,
        AssetClass::MetaData,
        AssetClass::ControlMgmt,
        AssetClass::UserProfile,
    ];
}

/// Protocol verb of a [`ProtocolMessage`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    KeyRequest,
    EnrichedRequest,
    Validate,
    ServiceProperties,
    PeerInit,
    PeerAck,
    QbnRelay,
    QbnAck,
    KsaTransfer,
    KsaPush,
    KsaAck,
    KsaDeliver,
    StatusUpdate,
    RouteRequest,
    RouteUpdate,
    RouteAck,
    Alarm,
    Heartbeat,
    Accounting,
    Error,
}

impl MessageKind {
    pub const ALL: [MessageKind; 20] = [
        MessageKind::KeyRequest,
        MessageKind::EnrichedRequest,
        MessageKind::Validate,
        MessageKind::ServiceProperties,
        MessageKind::PeerInit,
        MessageKind::PeerAck,
        MessageKind::QbnRelay,
        MessageKind::QbnAck,
        MessageKind::KsaTransfer,
        MessageKind::KsaPush,
        MessageKind::KsaAck,
        MessageKind::KsaDeliver,
        MessageKind::StatusUpdate,
        MessageKind::RouteRequest,
        MessageKind::RouteUpdate,
        MessageKind::RouteAck,
        MessageKind::Alarm,
        MessageKind::Heartbeat,
        MessageKind::Accounting,
        MessageKind::Error,
    ];

    /// The one asset class every message of this kind carries.
    pub fn asset_class(self) -> AssetClass {
        use MessageKind::*;
        match self {
            QbnRelay | KsaTransfer | KsaPush | KsaDeliver => AssetClass::KeyData,
            KeyRequest | PeerInit | PeerAck | QbnAck | KsaAck | Error => AssetClass::MetaData,
            EnrichedRequest | Validate | ServiceProperties | Accounting => AssetClass::UserProfile,
            StatusUpdate | RouteRequest | RouteUpdate | RouteAck | Alarm | Heartbeat => {
                AssetClass::ControlMgmt
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        use MessageKind::*;
        match self {
            KeyRequest => "KEY_REQUEST",
            EnrichedRequest => "ENRICHED_REQUEST",
            Validate => "VALIDATE",
            ServiceProperties => "SERVICE_PROPERTIES",
            PeerInit => "PEER_INIT",
            PeerAck => "PEER_ACK",
            QbnRelay => "QBN_RELAY",
            QbnAck => "QBN_ACK",
            KsaTransfer => "KSA_TRANSFER",
            KsaPush => "KSA_PUSH",
            KsaAck => "KSA_ACK",
            KsaDeliver => "KSA_DELIVER",
            StatusUpdate => "STATUS_UPDATE",
            RouteRequest => "ROUTE_REQUEST",
            RouteUpdate => "ROUTE_UPDATE",
            RouteAck => "ROUTE_ACK",
            Alarm => "ALARM",
            Heartbeat => "HEARTBEAT",
            Accounting => "ACCOUNTING",
            Error => "ERROR",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reason codes carried in `ERROR` messages, accounting records and
/// exchange outcomes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    EmptyMaterial,
    InsufficientKey,
    CapacityExceeded,
    NonceExhaustion,
    AuthFail,
    UnknownSae,
    OversizeRequest,
    NoSuchExchange,
    NotReady,
    Forbidden,
    UnknownUser,
    PaymentInvalid,
    PeerNotAllowed,
    QuotaExceeded,
    AaaTimeout,
    PeerUnreachable,
    PeerBusy,
    SchemaViolation,
    CorrelationMismatch,
    KeyStarvation,
    NoRoute,
    NoPath,
    HopLimit,
    InstallTimeout,
    UnknownSender,
    DuplicateRecord,
    DuplicateRequest,
    PolicyDeny,
    ChannelDown,
    ForbiddenChannel,
    LinkDown,
    BufferFull,
    Timeout,
}

impl ErrorCode {
    pub fn as_str(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str())
    }
}

/// Plaintext key material inside a message on an integrity-only intra-node
/// channel or the SAE delivery interface.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlainMaterial {
    pub len_bits: usize,
    #[serde(with = "hex::serde")]
    pub octets: Vec<u8>,
}

impl fmt::Debug for PlainMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PlainMaterial({} bits)", self.len_bits)
    }
}

/// 014-shaped request issued by an SAE to its UKMS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum KeyRequest {
    /// Master SAE asks for fresh keys shared with `slave_sae`.
    EncKeys {
        slave_sae: EntityId,
        number: u32,
        size_bits: u32,
    },
    /// Slave SAE collects keys the master already obtained.
    DecKeys {
        master_sae: EntityId,
        key_ids: Vec<KeyId>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaeRequest {
    pub master_sae: EntityId,
    pub slave_sae: EntityId,
    pub number: u32,
    pub size_bits: u32,
    pub correlation_id: CorrelationId,
}

impl SaeRequest {
    pub fn total_bits(&self) -> usize {
        self.number as usize * self.size_bits as usize
    }
}

/// SAE request plus the user information AAA needs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedRequest {
    pub inner: SaeRequest,
    pub user_account: String,
    pub ukms_id: EntityId,
}

/// Contract parameters returned by AAA, plus the directory translation of
/// the peer SAE.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceProperties {
    pub account_id: String,
    pub max_keys_per_day: u64,
    pub max_key_bits: u32,
    pub keys_remaining_today: u64,
    pub peer_ukms: EntityId,
    pub peer_akms: EntityId,
}

/// Request summary exchanged between AKMSs. Carries no service properties;
/// a receiver rejects any unknown field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerInit {
    pub number: u32,
    pub size_bits: u32,
    pub master_sae: EntityId,
    pub slave_sae: EntityId,
    pub remote_ukms: EntityId,
    pub sending_ckms: EntityId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerAck {
    pub entry_ckms: EntityId,
}

/// Hop-by-hop relay frame for a QBN key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayFrame {
    pub destination: EntityId,
    pub key_id: KeyId,
    pub hop_count: u32,
    pub wrapped: WrappedKey,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum QbnRelay {
    /// AKMS hands a fresh QBN key to its co-located CKMS.
    Handoff {
        destination: EntityId,
        key_id: KeyId,
        material: PlainMaterial,
    },
    /// CKMS to CKMS, wrapped under the link's KMA keys.
    Hop(RelayFrame),
    /// Destination CKMS hands the QBN key to its co-located AKMS.
    Arrived {
        key_id: KeyId,
        material: PlainMaterial,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QbnAck {
    pub key_id: KeyId,
}

/// KSA keys, concatenated and wrapped as one frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KsaBundle {
    pub master_sae: EntityId,
    pub slave_sae: EntityId,
    pub key_ids: Vec<KeyId>,
    pub size_bits: u32,
    pub wrapped: WrappedKey,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KsaAck {
    pub key_ids: Vec<KeyId>,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveredKey {
    pub key_id: KeyId,
    /// Base64 of the key octets.
    pub key: String,
}

impl DeliveredKey {
    pub fn new(key_id: KeyId, octets: &[u8]) -> Self {
        Self {
            key_id,
            key: base64::engine::general_purpose::STANDARD.encode(octets),
        }
    }

    pub fn octets(&self) -> Vec<u8> {
        base64::engine::general_purpose::STANDARD
            .decode(&self.key)
            .unwrap_or_default()
    }
}

impl fmt::Debug for DeliveredKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeliveredKey({})", self.key_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KsaDeliver {
    pub keys: Vec<DeliveredKey>,
}

/// Per-adjacent-link key availability reported by a CKMS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub link_id: LinkId,
    pub peer: EntityId,
    pub available_bits: u64,
    pub refill_rate_bps: f64,
    pub up: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusUpdate {
    pub links: Vec<LinkReport>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteRequest {
    pub destination: EntityId,
}

/// Routing table entry value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NextHop {
    /// This CKMS is the destination.
    Local,
    Via(EntityId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteUpdate {
    pub install_id: u64,
    pub destination: EntityId,
    /// `None` withdraws the entry.
    pub entry: Option<NextHop>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum RouteResult {
    Installed { version: u64 },
    Failed { code: ErrorCode },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteAck {
    pub install_id: u64,
    pub destination: EntityId,
    #[serde(flatten)]
    pub result: RouteResult,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Warn,
    Critical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlarmKind {
    LinkDown,
    LinkUp,
    RngDegraded,
    AuthFail,
    KeyStarvation,
    PolicyDeny,
    HeartbeatLapse,
    UnknownSender,
    HopLimit,
    CorrelationMismatch,
    NoSuchExchange,
}

impl AlarmKind {
    pub fn as_str(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmReport {
    pub severity: Severity,
    pub kind: AlarmKind,
    /// What the alarm is about, e.g. a link id. Never user information.
    pub subject: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub seq: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(
    tag = "status",
    content = "reason",
    rename_all = "SCREAMING_SNAKE_CASE"
)]
pub enum ExchangeOutcome {
    Delivered,
    Rejected(ErrorCode),
    Failed(ErrorCode),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub account_id: String,
    pub keys: u32,
    pub bits: u64,
    pub outcome: ExchangeOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub code: ErrorCode,
    pub retry_after_ms: Option<u64>,
}

impl ErrorReport {
    pub fn new(code: ErrorCode) -> Self {
        Self {
            code,
            retry_after_ms: None,
        }
    }
}

/// Kind-specific body of a [`ProtocolMessage`]; the variant is the kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Payload {
    KeyRequest(KeyRequest),
    EnrichedRequest(EnrichedRequest),
    Validate(EnrichedRequest),
    ServiceProperties(ServiceProperties),
    PeerInit(PeerInit),
    PeerAck(PeerAck),
    QbnRelay(QbnRelay),
    QbnAck(QbnAck),
    KsaTransfer(KsaBundle),
    KsaPush(KsaBundle),
    KsaAck(KsaAck),
    KsaDeliver(KsaDeliver),
    StatusUpdate(StatusUpdate),
    RouteRequest(RouteRequest),
    RouteUpdate(RouteUpdate),
    RouteAck(RouteAck),
    Alarm(AlarmReport),
    Heartbeat(Heartbeat),
    Accounting(AccountingReport),
    Error(ErrorReport),
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::KeyRequest(_) => MessageKind::KeyRequest,
            Payload::EnrichedRequest(_) => MessageKind::EnrichedRequest,
            Payload::Validate(_) => MessageKind::Validate,
            Payload::ServiceProperties(_) => MessageKind::ServiceProperties,
            Payload::PeerInit(_) => MessageKind::PeerInit,
            Payload::PeerAck(_) => MessageKind::PeerAck,
            Payload::QbnRelay(_) => MessageKind::QbnRelay,
            Payload::QbnAck(_) => MessageKind::QbnAck,
            Payload::KsaTransfer(_) => MessageKind::KsaTransfer,
            Payload::KsaPush(_) => MessageKind::KsaPush,
            Payload::KsaAck(_) => MessageKind::KsaAck,
            Payload::KsaDeliver(_) => MessageKind::KsaDeliver,
            Payload::StatusUpdate(_) => MessageKind::StatusUpdate,
            Payload::RouteRequest(_) => MessageKind::RouteRequest,
            Payload::RouteUpdate(_) => MessageKind::RouteUpdate,
            Payload::RouteAck(_) => MessageKind::RouteAck,
            Payload::Alarm(_) => MessageKind::Alarm,
            Payload::Heartbeat(_) => MessageKind::Heartbeat,
            Payload::Accounting(_) => MessageKind::Accounting,
            Payload::Error(_) => MessageKind::Error,
        }
    }

    pub fn asset_class(&self) -> AssetClass {
        self.kind().asset_class()
    }

    /// The wrapped key frame this payload carries, if any.
    pub fn wrapped_key(&self) -> Option<&WrappedKey> {
        match self {
            Payload::QbnRelay(QbnRelay::Hop(frame)) => Some(&frame.wrapped),
            Payload::KsaTransfer(b) | Payload::KsaPush(b) => Some(&b.wrapped),
            _ => None,
        }
    }
}

/// Typed, classified envelope exchanged between components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub msg_id: MsgId,
    pub correlation_id: CorrelationId,
    pub from: EntityId,
    pub to: EntityId,
    pub asset_class: AssetClass,
    #[serde(flatten)]
    pub body: Payload,
}

impl ProtocolMessage {
    pub fn new(
        msg_id: MsgId,
        correlation_id: CorrelationId,
        from: EntityId,
        to: EntityId,
        body: Payload,
    ) -> Self {
        Self {
            msg_id,
            correlation_id,
            from,
            to,
            asset_class: body.asset_class(),
            body,
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }

    /// Decodes a message and checks that its class tag matches its kind.
    pub fn from_json(bytes: &[u8]) -> Result<Self, ErrorCode> {
        let msg: ProtocolMessage =
            serde_json::from_slice(bytes).map_err(|_| ErrorCode::SchemaViolation)?;
        if msg.asset_class != msg.body.asset_class() {
            return Err(ErrorCode::SchemaViolation);
        }
        Ok(msg)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("protocol messages always serialize")
    }
}
