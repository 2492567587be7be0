//! A service over a small catalog: a public layer, a secret one, an embargoed
//! one and a public zone set, with principals of increasing clearance.
#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ark_core::difc::{Tag, TagSet};
use ark_core::ingest::polygons::{parse_geojson_polygons, PolygonSet, PolygonsKind};
use ark_core::{Digest, Label, LayerVersion, Principal, Registry};
use ark_service::{router, Clock, Config, Service};
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::{DateTime, TimeZone, Utc};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

#[path = "../../../core/tests/fixtures/mod.rs"]
pub mod fixtures;
pub mod fuzz;

pub const SECRET: &str = "kestrel-nest-sites";
pub const EMBARGO: &str = "census-embargo";

pub const PUBLIC: &str = "tok-public";
pub const ANALYST: &str = "tok-analyst";
pub const AUDITOR: &str = "tok-auditor";
pub const OFFICER: &str = "tok-officer";

pub fn embargo_end() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 6, 1, 0, 0, 0).unwrap()
}

pub fn registry() -> Registry {
    Registry {
        tags: TagSet::new([Tag::new(SECRET), Tag::embargoed(EMBARGO, embargo_end())]),
        principals: vec![
            Principal::new("public", Vec::<String>::new()).with_token(PUBLIC),
            Principal::new("analyst", [SECRET]).with_token(ANALYST),
            Principal::new("auditor", [SECRET, EMBARGO]).with_token(AUDITOR),
            Principal::new("officer", [SECRET]).with_caps([SECRET]).with_token(OFFICER),
        ],
    }
}

pub struct Env {
    pub dir: tempfile::TempDir,
    pub svc: Arc<Service>,
    pub app: Router,
    pub clock: Clock,
    pub forest: (Digest, LayerVersion),
    pub nests: (Digest, LayerVersion),
    pub census: (Digest, LayerVersion),
    pub parks: Digest,
}

impl Env {
    pub fn registry_dir(&self) -> std::path::PathBuf {
        self.dir.path().join("registry")
    }

    pub async fn call(&self, method: Method, uri: &str, token: Option<&str>, body: Option<&Value>) -> (StatusCode, Vec<u8>) {
        call(&self.app, method, uri, token, body).await
    }

    pub async fn get_json(&self, uri: &str, token: &str) -> (StatusCode, Value) {
        let (s, b) = self.call(Method::GET, uri, Some(token), None).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    /// Submits a run and waits for it to leave the running state.
    pub async fn run(&self, doc: &Value, token: &str) -> String {
        let (s, b) = self.call(Method::POST, "/runs", Some(token), Some(doc)).await;
        assert_eq!(s, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&b));
        let id = serde_json::from_slice::<Value>(&b).unwrap()["run_id"].as_str().unwrap().to_string();
        self.svc.wait_run(&id).await.unwrap();
        id
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, token: Option<&str>, body: Option<&Value>) -> (StatusCode, Vec<u8>) {
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
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

pub const PARKS: &str = r#"{"type":"FeatureCollection","features":[
  {"type":"Feature","id":"west","properties":{},"geometry":{"type":"Polygon","coordinates":[[[0.0,19.4],[0.3,19.4],[0.3,20.0],[0.0,20.0],[0.0,19.4]]]}},
  {"type":"Feature","id":"east","properties":{},"geometry":{"type":"Polygon","coordinates":[[[0.3,19.4],[0.64,19.4],[0.64,19.9],[0.3,19.9],[0.3,19.4]]]}}]}"#;

pub fn env() -> Env {
    env_with(|c| c)
}

pub fn env_with(tweak: impl FnOnce(Config) -> Config) -> Env {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let reg = dir.path().join("registry");
    registry().save(&reg).unwrap();
    let store = ark_core::Store::open(&data).unwrap();
    let g = fixtures::grid(64, 64);
    let forest = fixtures::u8_layer(&store, "forest", &g, fixtures::ramp(64, 64, 1));
    let secret = |salt| fixtures::ramp(64, 64, salt).into_iter().map(|v| (v + 3.0) % 200.0).collect::<Vec<_>>();
    let nests = fixtures::commit(&store, "nests", &g, ark_core::DType::U8, Some(255.0), vec![secret(7)], &Label::from_tags([SECRET]));
    let census = fixtures::commit(&store, "census", &g, ark_core::DType::U8, Some(255.0), vec![secret(11)], &Label::from_tags([EMBARGO]));
    let parks = fixtures::commit_polygons(
        &store,
        PolygonSet {
            kind: PolygonsKind::default(),
            name: "parks".into(),
            time_stamp: "2024-01-01T00:00:00Z".into(),
            label: Label::public(),
            zones: parse_geojson_polygons(PARKS).unwrap(),
        },
    );
    let clock = Clock::fixed(fixtures::t0());
    let mut config = Config::new(&data, &reg);
    config.clock = clock.clone();
    config.retry_base = Duration::from_millis(1);
    let svc = Service::open(tweak(config)).unwrap();
    Env { app: router(svc.clone()), svc, clock, forest, nests, census, parks, dir }
}

/// A local webhook receiver that fails the first `fail_first` requests with 500.
pub struct Hook {
    pub url: String,
    pub received: Arc<Mutex<Vec<Value>>>,
}

pub async fn hook(fail_first: usize) -> Hook {
    use axum::extract::State;
    use axum::routing::post;
    type Shared = (Arc<Mutex<Vec<Value>>>, Arc<Mutex<usize>>, usize);
    async fn receive(State((got, calls, fail)): State<Shared>, axum::Json(v): axum::Json<Value>) -> StatusCode {
        let mut n = calls.lock().unwrap();
        *n += 1;
        if *n <= fail {
            return StatusCode::INTERNAL_SERVER_ERROR;
        }
        got.lock().unwrap().push(v);
        StatusCode::NO_CONTENT
    }
    let received = Arc::new(Mutex::new(Vec::new()));
    let state: Shared = (received.clone(), Arc::new(Mutex::new(0)), fail_first);
    let app = Router::new().route("/hook", post(receive)).with_state(state);
    let listener = tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Hook { url: format!("http://{addr}/hook"), received }
}
