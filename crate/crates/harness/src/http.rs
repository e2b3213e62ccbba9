//! HTTP front end of a socket deployment: the SAE key delivery API and the
//! operator's read and admin endpoints.
//!
//! SAEs authenticate with `Authorization: Bearer <credential>`, using the
//! credential provisioned for them in the topology config.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use qkdn_core::aaa_manager::UserProfile;
use qkdn_core::config::TopologyConfig;
use qkdn_core::deploy::{Deployment, NOT_READY_RETRY_MS};
use qkdn_core::domain::{
    DeliveredKey, EntityId, ErrorCode, ErrorReport, KeyId, KeyRequest, SimTime,
};
use qkdn_core::engine::{Command, Node};
use qkdn_core::transport::socket::{SocketNet, SocketOptions};

/// How long an API call waits for the network.
const API_TIMEOUT: Duration = Duration::from_secs(10);

pub struct ApiState {
    pub net: SocketNet,
    credentials: BTreeMap<String, EntityId>,
    ukms_of: BTreeMap<EntityId, EntityId>,
    controller: EntityId,
    aaa: EntityId,
    manager: EntityId,
}

impl ApiState {
    /// Launches `dep` on loopback sockets and wraps it for serving.
    pub async fn launch(
        cfg: &TopologyConfig,
        dep: Deployment,
        opts: SocketOptions,
    ) -> std::io::Result<Self> {
        let credentials = cfg
            .saes
            .iter()
            .map(|s| (s.credential.clone(), EntityId::sae(&s.id)))
            .collect();
        let ukms_of = dep
            .nodes
            .values()
            .filter_map(|n| match n {
                Node::Sae(s) => Some((s.id().clone(), s.ukms().clone())),
                _ => None,
            })
            .collect();
        let (controller, aaa, manager) =
            (dep.controller.clone(), dep.aaa.clone(), dep.manager.clone());
        let net = SocketNet::launch(dep, opts).await?;
        Ok(Self {
            net,
            credentials,
            ukms_of,
            controller,
            aaa,
            manager,
        })
    }
}

type Shared = Arc<ApiState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/v1/keys/{slave}/status", get(status))
        .route("/api/v1/keys/{slave}/enc_keys", post(enc_keys))
        .route("/api/v1/keys/{master}/dec_keys", post(dec_keys))
        .route("/controller/v1/links", get(links))
        .route("/controller/v1/paths", get(paths))
        .route("/aaa/v1/accounts/{id}/usage", get(usage))
        .route("/aaa/v1/profiles/{id}", put(put_profile))
        .route("/manager/v1/alarms", get(alarms))
        .with_state(state)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut res = (self.0, Json(json!({ "message": self.1 }))).into_response();
        if self.0 == StatusCode::SERVICE_UNAVAILABLE {
            let secs = NOT_READY_RETRY_MS.div_ceil(1000).max(1).to_string();
            res.headers_mut()
                .insert(header::RETRY_AFTER, secs.parse().expect("digits"));
        }
        res
    }
}

pub fn status_for(code: ErrorCode) -> StatusCode {
    use ErrorCode::*;
    match code {
        OversizeRequest | SchemaViolation | DuplicateRequest => StatusCode::BAD_REQUEST,
        UnknownSae | UnknownUser | NoSuchExchange => StatusCode::NOT_FOUND,
        Forbidden | PeerNotAllowed | PaymentInvalid | PolicyDeny | ForbiddenChannel => {
            StatusCode::FORBIDDEN
        }
        QuotaExceeded => StatusCode::TOO_MANY_REQUESTS,
        NotReady => StatusCode::SERVICE_UNAVAILABLE,
        Timeout | AaaTimeout => StatusCode::GATEWAY_TIMEOUT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<ErrorReport> for ApiError {
    fn from(e: ErrorReport) -> Self {
        ApiError(status_for(e.code), e.code.as_str().to_string())
    }
}

fn caller(state: &ApiState, headers: &HeaderMap) -> Result<EntityId, ApiError> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .and_then(|c| state.credentials.get(c.trim()))
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::UNAUTHORIZED, "UNAUTHORIZED".into()))
}

#[derive(Serialize)]
struct ApiKey {
    #[serde(rename = "key_ID")]
    key_id: KeyId,
    key: String,
}

#[derive(Serialize)]
struct KeyContainer {
    keys: Vec<ApiKey>,
}

impl From<Vec<DeliveredKey>> for KeyContainer {
    fn from(keys: Vec<DeliveredKey>) -> Self {
        KeyContainer {
            keys: keys
                .into_iter()
                .map(|k| ApiKey {
                    key_id: k.key_id,
                    key: k.key,
                })
                .collect(),
        }
    }
}

async fn status(
    State(s): State<Shared>,
    Path(slave): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let master = caller(&s, &headers)?;
    let ukms = s
        .ukms_of
        .get(&master)
        .ok_or(ApiError(StatusCode::NOT_FOUND, "UNKNOWN_SAE".into()))?;
    let slave = EntityId::sae(&slave);
    let st = s
        .net
        .with_node(ukms, |n| match n {
            Node::Ukms(u) => Some(u.status(&master, &slave)),
            _ => None,
        })
        .flatten()
        .ok_or(ApiError(StatusCode::NOT_FOUND, "UNKNOWN_SAE".into()))?;
    Ok(Json(st).into_response())
}

#[derive(Deserialize)]
struct EncBody {
    #[serde(default = "one")]
    number: u32,
    #[serde(default = "default_size")]
    size: u32,
}

fn one() -> u32 {
    1
}

fn default_size() -> u32 {
    256
}

async fn enc_keys(
    State(s): State<Shared>,
    Path(slave): Path<String>,
    headers: HeaderMap,
    body: Option<Json<EncBody>>,
) -> Result<Json<KeyContainer>, ApiError> {
    let master = caller(&s, &headers)?;
    let Json(body) = body.unwrap_or(Json(EncBody {
        number: 1,
        size: 256,
    }));
    let request = KeyRequest::EncKeys {
        slave_sae: EntityId::sae(&slave),
        number: body.number,
        size_bits: body.size,
    };
    Ok(Json(
        s.net
            .api_request(&master, request, API_TIMEOUT)
            .await?
            .into(),
    ))
}

/// Accepts both bare ids and `{"key_ID": ...}` objects.
#[derive(Deserialize)]
#[serde(untagged)]
enum KeyRef {
    Bare(KeyId),
    Wrapped {
        #[serde(rename = "key_ID")]
        key_id: KeyId,
    },
}

#[derive(Deserialize)]
struct DecBody {
    #[serde(rename = "key_IDs")]
    key_ids: Vec<KeyRef>,
}

async fn dec_keys(
    State(s): State<Shared>,
    Path(master): Path<String>,
    headers: HeaderMap,
    Json(body): Json<DecBody>,
) -> Result<Json<KeyContainer>, ApiError> {
    let slave = caller(&s, &headers)?;
    let key_ids = body
        .key_ids
        .into_iter()
        .map(|k| match k {
            KeyRef::Bare(id) | KeyRef::Wrapped { key_id: id } => id,
        })
        .collect();
    let request = KeyRequest::DecKeys {
        master_sae: EntityId::sae(&master),
        key_ids,
    };
    Ok(Json(
        s.net
            .api_request(&slave, request, API_TIMEOUT)
            .await?
            .into(),
    ))
}

fn read<T>(
    s: &ApiState,
    id: &EntityId,
    f: impl FnOnce(&Node, SimTime) -> Option<T>,
) -> Result<T, ApiError> {
    let now = s.net.now();
    s.net.with_node(id, |n| f(n, now)).flatten().ok_or_else(|| {
        ApiError(
            StatusCode::INTERNAL_SERVER_ERROR,
            "COMPONENT_UNAVAILABLE".into(),
        )
    })
}

async fn links(State(s): State<Shared>) -> Result<Response, ApiError> {
    let v = read(&s, &s.controller, |n, now| match n {
        Node::Controller(c) => Some(c.link_states(now)),
        _ => None,
    })?;
    Ok(Json(v).into_response())
}

async fn paths(State(s): State<Shared>) -> Result<Response, ApiError> {
    let v = read(&s, &s.controller, |n, _| match n {
        Node::Controller(c) => Some(c.recent_paths().cloned().collect::<Vec<_>>()),
        _ => None,
    })?;
    Ok(Json(v).into_response())
}

async fn usage(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let v = read(&s, &s.aaa, |n, now| match n {
        Node::Aaa(a) => Some(a.profile(&id).map(|_| a.usage(&id, now.day()))),
        _ => None,
    })?;
    match v {
        Some(u) => Ok(
            Json(json!({ "account_id": id, "day": s.net.now().day(), "usage": u })).into_response(),
        ),
        None => Err(ApiError(StatusCode::NOT_FOUND, "UNKNOWN_USER".into())),
    }
}

async fn put_profile(
    State(s): State<Shared>,
    Path(id): Path<String>,
    Json(profile): Json<UserProfile>,
) -> Result<StatusCode, ApiError> {
    if profile.account_id != id {
        return Err(ApiError(StatusCode::BAD_REQUEST, "SCHEMA_VIOLATION".into()));
    }
    s.net.command(&s.aaa, Command::PutProfile(profile));
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct Since {
    /// Microseconds since the deployment started.
    since: Option<u64>,
}

async fn alarms(State(s): State<Shared>, Query(q): Query<Since>) -> Result<Response, ApiError> {
    let since = SimTime::from_micros(q.since.unwrap_or(0));
    let v = read(&s, &s.manager, |n, _| match n {
        Node::Manager(m) => Some(m.alarms_since(since)),
        _ => None,
    })?;
    Ok(Json(v).into_response())
}
