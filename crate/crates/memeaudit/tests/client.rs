mod common;

use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use memeaudit::client::{ClientError, ModelEndpoint, VlmClient};
use memeaudit::imageio::encode_png;
use memeaudit::ledger::RequestKey;
use memeaudit::mock::{mock_embedding, MockRule, MockScript, MockServer};
use serde_json::json;

fn endpoint(base_url: &str) -> ModelEndpoint {
    let mut ep = ModelEndpoint::new("m", base_url, "mock-model");
    ep.requests_per_minute = 100_000;
    ep.retry.initial_backoff_ms = 1;
    ep.retry.max_backoff_ms = 4;
    ep
}

fn image() -> memeaudit::imageio::EncodedImage {
    encode_png(&common::meme_image(0)).unwrap()
}

async fn serve(router: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    format!("http://{addr}/v1")
}

#[tokio::test]
async fn retries_rate_limits_then_succeeds() {
    let script = MockScript::new("hateful").rule(MockRule::reply("not-hateful - fine").failing_first(2, 429));
    let server = MockServer::start(script, 0).await.unwrap();
    let client = VlmClient::new(endpoint(&server.base_url())).unwrap();
    let r = client
        .chat_classify(&RequestKey::original("s1", "vn-vn", "mock-model"), "classify", &image())
        .await
        .unwrap();
    assert_eq!(r.text, "not-hateful - fine");
    assert_eq!(r.attempt_count, 3);
    assert_eq!(client.requests_sent(), 3);
    server.stop().await;
}

#[tokio::test]
async fn exhausted_retries_report_every_attempt() {
    let script = MockScript::new("x").rule(MockRule::reply("x").failing_first(10, 503));
    let server = MockServer::start(script, 0).await.unwrap();
    let client = VlmClient::new(endpoint(&server.base_url())).unwrap();
    let err = client
        .chat_classify(&RequestKey::original("s1", "vn-vn", "m"), "p", &image())
        .await
        .unwrap_err();
    match err {
        ClientError::Transport { attempts, log } => {
            assert_eq!(attempts, 5);
            assert_eq!(log.len(), 5);
            assert!(log[0].contains("503"), "{log:?}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[tokio::test]
async fn empty_object_is_a_protocol_error() {
    let url = serve(Router::new().route("/v1/chat/completions", post(|| async { Json(json!({})) }))).await;
    let client = VlmClient::new(endpoint(&url)).unwrap();
    let err = client
        .chat_classify(&RequestKey::original("s1", "vn-vn", "m"), "p", &image())
        .await
        .unwrap_err();
    assert!(
        matches!(&err, ClientError::Protocol(m) if m.contains("choices[0].message.content")),
        "{err}"
    );
    assert_eq!(client.requests_sent(), 1);
}

#[tokio::test]
async fn unauthorized_is_a_config_error_without_retry() {
    let url = serve(Router::new().route("/v1/chat/completions", post(|| async { StatusCode::UNAUTHORIZED }))).await;
    let client = VlmClient::new(endpoint(&url)).unwrap();
    let err = client
        .chat_classify(&RequestKey::original("s1", "vn-vn", "m"), "p", &image())
        .await
        .unwrap_err();
    assert!(matches!(err, ClientError::Config(_)), "{err}");
    assert_eq!(client.requests_sent(), 1);
}

#[tokio::test]
async fn missing_token_variable_is_a_config_error() {
    let mut ep = endpoint("http://127.0.0.1:9/v1");
    ep.auth_token_env = Some("MEMEAUDIT_TEST_TOKEN_THAT_IS_NEVER_SET".into());
    assert!(matches!(VlmClient::new(ep), Err(ClientError::Config(_))));
}

#[tokio::test]
async fn inflight_cap_is_honoured() {
    let script = MockScript::new("hateful").rule(MockRule::reply("hateful").with_latency(40));
    let server = MockServer::start(script, 0).await.unwrap();
    let mut ep = endpoint(&server.base_url());
    ep.max_inflight = 3;
    let client = std::sync::Arc::new(VlmClient::new(ep).unwrap());
    let img = image();
    let tasks: Vec<_> = (0..12)
        .map(|i| {
            let (client, img) = (client.clone(), img.clone());
            tokio::spawn(async move {
                client
                    .chat_classify(&RequestKey::original(&format!("s{i}"), "vn-vn", "m"), "p", &img)
                    .await
                    .unwrap()
            })
        })
        .collect();
    for t in tasks {
        t.await.unwrap();
    }
    assert_eq!(server.stats().chat(), 12);
    assert_eq!(server.stats().peak_inflight(), 3);
}

#[tokio::test]
async fn embeddings_are_deterministic_unit_vectors() {
    let mut script = MockScript::new("x");
    script.embedding_seed = 11;
    script.embedding_dim = 32;
    let server = MockServer::start(script, 0).await.unwrap();
    let client = VlmClient::new(endpoint(&server.base_url())).unwrap();
    let a = client.embed("the same payload").await.unwrap();
    let b = client.embed("the same payload").await.unwrap();
    let c = client.embed("another payload").await.unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 32);
    assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    let served = mock_embedding(11, 32, "the same payload");
    assert!(a.iter().zip(&served).all(|(x, y)| (x - y).abs() < 1e-12));
    assert_eq!(server.stats().embed(), 3);
}

#[tokio::test]
async fn embedding_dimension_change_is_rejected() {
    let url = serve(Router::new().route(
        "/v1/embeddings",
        post(|Json(body): Json<serde_json::Value>| async move {
            let n = if body["input"] == "short" { 2 } else { 3 };
            Json(json!({"data": [{"embedding": vec![1.0; n]}]}))
        }),
    ))
    .await;
    let client = VlmClient::new(endpoint(&url)).unwrap();
    client.embed("long").await.unwrap();
    assert!(matches!(client.embed("short").await, Err(ClientError::Protocol(_))));
}

#[tokio::test]
async fn identity_headers_drive_mock_rules() {
    let script = MockScript::new("not-hateful").rule(MockRule::reply("hateful").for_sample("s7").for_occlusion("occ2"));
    let server = MockServer::start(script, 0).await.unwrap();
    let client = VlmClient::new(endpoint(&server.base_url())).unwrap();
    let hit = client
        .chat_classify(&RequestKey::occluded("s7", "vn-vn", "m", "occ2"), "p", &image())
        .await
        .unwrap();
    let miss = client
        .chat_classify(&RequestKey::original("s7", "vn-vn", "m"), "p", &image())
        .await
        .unwrap();
    assert_eq!((hit.text.as_str(), miss.text.as_str()), ("hateful", "not-hateful"));
}
