use serde::{Deserialize, Serialize};

use crate::domain::{AssetClass, EntityId, EntityKind, ProtocolMessage};
use crate::transport::{ChannelKind, ChannelSpec};

/// Protections a channel provides or a message class demands.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PropertySet {
    pub confidentiality: bool,
    pub integrity: bool,
    pub authenticity: bool,
}

impl PropertySet {
    pub const NONE: PropertySet = PropertySet {
        confidentiality: false,
        integrity: false,
        authenticity: false,
    };
    pub const IA: PropertySet = PropertySet {
        confidentiality: false,
        integrity: true,
        authenticity: true,
    };
    pub const CIA: PropertySet = PropertySet {
        confidentiality: true,
        integrity: true,
        authenticity: true,
    };

    pub fn union(self, other: PropertySet) -> PropertySet {
        PropertySet {
            confidentiality: self.confidentiality || other.confidentiality,
            integrity: self.integrity || other.integrity,
            authenticity: self.authenticity || other.authenticity,
        }
    }

    pub fn covers(self, required: PropertySet) -> bool {
        (self.confidentiality || !required.confidentiality)
            && (self.integrity || !required.integrity)
            && (self.authenticity || !required.authenticity)
    }
}

/// Properties a class of message needs on a given kind of channel.
pub fn required_properties(class: AssetClass, channel: ChannelKind) -> PropertySet {
    match (class, channel) {
        // co-located components: no confidentiality needed
        (AssetClass::KeyData, ChannelKind::IntraNode) => PropertySet::IA,
        (AssetClass::KeyData, _) => PropertySet::CIA,
        (AssetClass::UserProfile, _) => PropertySet::CIA,
        (AssetClass::MetaData | AssetClass::ControlMgmt, _) => PropertySet::IA,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DenyReason {
    ForbiddenChannel,
    UnregisteredChannel,
    EndpointMismatch,
    ClassNotPermitted,
    PropertiesUnmet,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::ForbiddenChannel => "FORBIDDEN_CHANNEL",
            DenyReason::UnregisteredChannel => "UNREGISTERED_CHANNEL",
            DenyReason::EndpointMismatch => "ENDPOINT_MISMATCH",
            DenyReason::ClassNotPermitted => "CLASS_NOT_PERMITTED",
            DenyReason::PropertiesUnmet => "PROPERTIES_UNMET",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyDecision {
    Allow,
    Deny(DenyReason),
}

impl PolicyDecision {
    pub fn is_allow(self) -> bool {
        self == PolicyDecision::Allow
    }
}

/// Component pairs that must never talk directly, whatever the config says.
pub fn is_forbidden_pair(a: &EntityId, b: &EntityId) -> bool {
    use EntityKind::*;
    let forbidden = |x: EntityKind, y: EntityKind| match (x, y) {
        (Akms, Controller) => true,
        (Sae, k) => k != Ukms,
        (Ukms, k) => k.is_carrier_interior(),
        _ => false,
    };
    forbidden(a.kind(), b.kind()) || forbidden(b.kind(), a.kind())
}

/// Decides whether `msg` may cross `channel`. There is no default allow:
/// an unregistered channel is denied.
pub fn enforce_policy(msg: &ProtocolMessage, channel: Option<&ChannelSpec>) -> PolicyDecision {
    if is_forbidden_pair(&msg.from, &msg.to) {
        return PolicyDecision::Deny(DenyReason::ForbiddenChannel);
    }
    let Some(chan) = channel else {
        return PolicyDecision::Deny(DenyReason::UnregisteredChannel);
    };
    if !chan.connects(&msg.from, &msg.to) {
        return PolicyDecision::Deny(DenyReason::EndpointMismatch);
    }
    if msg.asset_class != msg.body.asset_class() || !chan.allowed.contains(&msg.asset_class) {
        return PolicyDecision::Deny(DenyReason::ClassNotPermitted);
    }
    let mut provided = chan.security;
    if msg.body.wrapped_key().is_some() {
        // a relay frame carries its own confidentiality and authentication
        provided = provided.union(PropertySet::CIA);
    }
    if provided.covers(required_properties(msg.asset_class, chan.kind)) {
        PolicyDecision::Allow
    } else {
        PolicyDecision::Deny(DenyReason::PropertiesUnmet)
    }
}
