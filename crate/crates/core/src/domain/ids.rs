use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use super::DomainError;

/// Component category of an [`EntityId`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntityKind {
    Sae,
    Ukms,
    Akms,
    Ckms,
    QkdModule,
    Controller,
    Manager,
    Aaa,
}

impl EntityKind {
    pub const ALL: [EntityKind; 8] = [
        EntityKind::Sae,
        EntityKind::Ukms,
        EntityKind::Akms,
        EntityKind::Ckms,
        EntityKind::QkdModule,
        EntityKind::Controller,
        EntityKind::Manager,
        EntityKind::Aaa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Sae => "SAE",
            EntityKind::Ukms => "UKMS",
            EntityKind::Akms => "AKMS",
            EntityKind::Ckms => "CKMS",
            EntityKind::QkdModule => "QKD_MODULE",
            EntityKind::Controller => "CONTROLLER",
            EntityKind::Manager => "MANAGER",
            EntityKind::Aaa => "AAA",
        }
    }

    /// True for components that live inside the operator's carrier domain
    /// and must never talk to user-node components.
    pub fn is_carrier_interior(self) -> bool {
        matches!(
            self,
            EntityKind::Ckms | EntityKind::Controller | EntityKind::Manager | EntityKind::Aaa
        )
    }
}

impl FromStr for EntityKind {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DomainError::InvalidEntity(s.to_string()))
    }
}

/// Globally unique component identity, rendered as `KIND/name`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId {
    kind: EntityKind,
    name: String,
}

impl EntityId {
    pub fn new(kind: EntityKind, name: impl Into<String>) -> Result<Self, DomainError> {
        let name = name.into();
        if name.is_empty() || name.contains('/') {
            return Err(DomainError::InvalidEntity(name));
        }
        Ok(Self { kind, name })
    }

    fn of(kind: EntityKind, name: &str) -> Self {
        Self::new(kind, name).expect("entity name must be non-empty and contain no '/'")
    }

    pub fn sae(name: &str) -> Self {
        Self::of(EntityKind::Sae, name)
    }
    pub fn ukms(name: &str) -> Self {
        Self::of(EntityKind::Ukms, name)
    }
    pub fn akms(name: &str) -> Self {
        Self::of(EntityKind::Akms, name)
    }
    pub fn ckms(name: &str) -> Self {
        Self::of(EntityKind::Ckms, name)
    }
    pub fn qkd_module(name: &str) -> Self {
        Self::of(EntityKind::QkdModule, name)
    }
    pub fn controller(name: &str) -> Self {
        Self::of(EntityKind::Controller, name)
    }
    pub fn manager(name: &str) -> Self {
        Self::of(EntityKind::Manager, name)
    }
    pub fn aaa(name: &str) -> Self {
        Self::of(EntityKind::Aaa, name)
    }

    pub fn kind(&self) -> EntityKind {
        self.kind
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind.as_str(), self.name)
    }
}

impl fmt::Debug for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for EntityId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, name) = s
            .split_once('/')
            .ok_or_else(|| DomainError::InvalidEntity(s.to_string()))?;
        EntityId::new(kind.parse()?, name)
    }
}

impl Serialize for EntityId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EntityId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

macro_rules! uuid_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Uuid);

        impl $name {
            pub const NIL: $name = $name(Uuid::nil());

            /// Fresh random identifier drawn from `rng`.
            pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
                let mut bytes = [0u8; 16];
                rng.fill_bytes(&mut bytes);
                Self(uuid::Builder::from_random_bytes(bytes).into_uuid())
            }

            pub fn from_bytes(bytes: [u8; 16]) -> Self {
                Self(Uuid::from_bytes(bytes))
            }

            pub fn as_bytes(&self) -> &[u8; 16] {
                self.0.as_bytes()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Display::fmt(&self.0.hyphenated(), f)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Display::fmt(self, f)
            }
        }

        impl FromStr for $name {
            type Err = DomainError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Uuid::parse_str(s)
                    .map(Self)
                    .map_err(|_| DomainError::InvalidIdentifier(s.to_string()))
            }
        }
    };
}

uuid_newtype!(
    /// 128-bit key identifier, rendered as 36-character hyphenated hex.
    KeyId
);
uuid_newtype!(
    /// Identifier tying together every message of one end-to-end exchange.
    CorrelationId
);
uuid_newtype!(MsgId);

impl KeyId {
    /// Identifier of the `ordinal`-th split remainder descending from `root`:
    /// the first 16 bytes of `SHA-256(root ‖ ordinal_be32)`.
    pub fn derive(root: &KeyId, ordinal: u32) -> KeyId {
        let mut h = Sha256::new();
        h.update(root.as_bytes());
        h.update(ordinal.to_be_bytes());
        let digest = h.finalize();
        let mut out = [0u8; 16];
        out.copy_from_slice(&digest[..16]);
        KeyId::from_bytes(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entity_id_roundtrips_through_text() {
        let id = EntityId::ckms("node-7");
        assert_eq!(id.to_string(), "CKMS/node-7");
        assert_eq!("CKMS/node-7".parse::<EntityId>().unwrap(), id);
        let json = serde_json::to_string(&id).unwrap();
        assert_eq!(json, "\"CKMS/node-7\"");
    }

    #[test]
    fn entity_name_must_be_non_empty() {
        assert!(EntityId::new(EntityKind::Sae, "").is_err());
        assert!("BOGUS/x".parse::<EntityId>().is_err());
    }

    #[test]
    fn key_id_is_canonical_36_char_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = KeyId::random(&mut rng);
        let s = id.to_string();
        assert_eq!(s.len(), 36);
        assert_eq!(s.matches('-').count(), 4);
        assert_eq!(s.parse::<KeyId>().unwrap(), id);
    }

    #[test]
    fn derived_ids_depend_on_ordinal() {
        let root = KeyId::from_bytes([7; 16]);
        assert_ne!(KeyId::derive(&root, 1), KeyId::derive(&root, 2));
        assert_eq!(KeyId::derive(&root, 1), KeyId::derive(&root, 1));
    }
}
