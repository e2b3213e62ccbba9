use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use qkdn::http::{router, ApiState};
use qkdn_core::config::TopologyConfig;
use qkdn_core::deploy::{deploy, DeployOptions};
use qkdn_core::transport::socket::SocketOptions;
use qkdn_core::transport::TraceSink;

async fn app() -> (Router, Arc<ApiState>) {
    let cfg = TopologyConfig::parse(include_str!("../../../configs/reference.json")).unwrap();
    let dep = deploy(&cfg, &DeployOptions::default()).unwrap();
    let opts = SocketOptions {
        psk: hex::decode(&cfg.secrets.channel_psk).unwrap(),
        link_tick: Duration::from_secs(1),
        prefill_bits: 1 << 16,
        trace: TraceSink::default(),
        seed: cfg.seed,
    };
    let state = Arc::new(ApiState::launch(&cfg, dep, opts).await.unwrap());
    (router(Arc::clone(&state)), state)
}

async fn call(
    app: &Router,
    method: &str,
    uri: &str,
    token: Option<&str>,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn key_delivery_api_round_trip() {
    let (app, state) = app().await;

    let (st, v) = call(
        &app,
        "GET",
        "/api/v1/keys/sae-b/status",
        Some("sae-a-secret"),
        None,
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{v}");

    let (st, enc) = call(
        &app,
        "POST",
        "/api/v1/keys/sae-b/enc_keys",
        Some("sae-a-secret"),
        Some(json!({"number": 2, "size": 256})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{enc}");
    let keys = enc["keys"].as_array().unwrap();
    assert_eq!(keys.len(), 2);

    let ids: Vec<Value> = keys
        .iter()
        .map(|k| json!({"key_ID": k["key_ID"]}))
        .collect();
    let mut dec = Value::Null;
    for _ in 0..200 {
        let (st, v) = call(
            &app,
            "POST",
            "/api/v1/keys/sae-a/dec_keys",
            Some("sae-b-secret"),
            Some(json!({"key_IDs": ids})),
        )
        .await;
        if st == StatusCode::OK {
            dec = v;
            break;
        }
        assert!(
            matches!(st, StatusCode::SERVICE_UNAVAILABLE | StatusCode::NOT_FOUND),
            "{st} {v}"
        );
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(dec["keys"], enc["keys"]);

    let (st, links) = call(&app, "GET", "/controller/v1/links", None, None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(links.as_array().is_some_and(|l| !l.is_empty()));
    let (st, usage) = call(
        &app,
        "GET",
        "/aaa/v1/accounts/acct-berlin/usage",
        None,
        None,
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(usage["account_id"], "acct-berlin");
    state.net.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn api_maps_failures_to_http_statuses() {
    let (app, state) = app().await;
    let enc = "/api/v1/keys/sae-b/enc_keys";

    let (st, _) = call(&app, "POST", enc, None, Some(json!({}))).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, _) = call(&app, "POST", enc, Some("wrong"), Some(json!({}))).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);

    let (st, v) = call(
        &app,
        "POST",
        enc,
        Some("sae-a-secret"),
        Some(json!({"size": 8192})),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST, "{v}");
    assert_eq!(v["message"], "OVERSIZE_REQUEST");

    // sae-a's account only allows the pair with sae-b
    let (st, v) = call(
        &app,
        "POST",
        "/api/v1/keys/sae-c/enc_keys",
        Some("sae-a-secret"),
        Some(json!({})),
    )
    .await;
    assert_eq!(st, StatusCode::FORBIDDEN, "{v}");

    let (st, _) = call(&app, "GET", "/aaa/v1/accounts/nobody/usage", None, None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    state.net.shutdown();
}
