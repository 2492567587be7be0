//! HTTP front end over an ark store: catalog and tile reads, pipeline runs,
//! provenance queries and change subscriptions, all checked against the
//! caller's clearance.

mod clock;
mod error;
mod routes;
mod subscriptions;

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime};

use ark_core::difc::{can_flow, TagSet};
use ark_core::{Digest, Label, Principal, Registry, Store};

pub use clock::{Clock, CLOCK_ENV};
pub use error::ApiError;
pub use routes::router;
pub use subscriptions::{Delivery, DeliveryStatus, Subscription, SubscriptionRequest, WebhookPayload, MAX_RETRIES};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] ark_core::store::StoreError),
    #[error(transparent)]
    Registry(#[from] ark_core::difc::DifcError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt service state: {0}")]
    State(String),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct Config {
    pub data_dir: PathBuf,
    pub registry_dir: PathBuf,
    /// Worker threads per pipeline run.
    pub workers: usize,
    /// First webhook retry delay; doubles on each further retry.
    pub retry_base: Duration,
    /// How often `serve` checks subscribed layers for new commits.
    pub poll_interval: Duration,
    pub clock: Clock,
}

impl Config {
    pub fn new(data_dir: impl Into<PathBuf>, registry_dir: impl Into<PathBuf>) -> Self {
        Config {
            data_dir: data_dir.into(),
            registry_dir: registry_dir.into(),
            workers: 1,
            retry_base: Duration::from_millis(250),
            poll_interval: Duration::from_secs(2),
            clock: Clock::system(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunState {
    Running,
    Succeeded(Digest),
    Failed(String),
}

#[derive(Debug, Clone)]
pub(crate) struct RunEntry {
    pub submitter: String,
    pub state: RunState,
}

type Stamp = (Option<SystemTime>, Option<SystemTime>);

struct RegistryCache {
    registry: Registry,
    stamp: Stamp,
}

pub struct Service {
    store: Store,
    config: Config,
    registry: RwLock<RegistryCache>,
    runs: RwLock<HashMap<String, RunEntry>>,
    subs: Mutex<subscriptions::Book>,
    notify_lock: tokio::sync::Mutex<()>,
    http: reqwest::Client,
}

fn registry_stamp(dir: &Path) -> Stamp {
    let m = |f: &str| fs::metadata(dir.join(f)).and_then(|m| m.modified()).ok();
    (m("tags.json"), m("principals.json"))
}

impl Service {
    pub fn open(config: Config) -> Result<Arc<Self>, ServiceError> {
        let store = Store::open(&config.data_dir)?;
        let stamp = registry_stamp(&config.registry_dir);
        let registry = Registry::load(&config.registry_dir)?;
        let subs = subscriptions::Book::open(&config.data_dir.join("service"))?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(Arc::new(Service {
            store,
            config,
            registry: RwLock::new(RegistryCache { registry, stamp }),
            runs: RwLock::new(HashMap::new()),
            subs: Mutex::new(subs),
            notify_lock: tokio::sync::Mutex::new(()),
            http,
        }))
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn clock(&self) -> &Clock {
        &self.config.clock
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// Re-reads the registry from disk, keeping the old one if it fails to load.
    pub fn reload_registry(&self) -> Result<(), ServiceError> {
        let stamp = registry_stamp(&self.config.registry_dir);
        let registry = Registry::load(&self.config.registry_dir)?;
        *self.registry.write().unwrap() = RegistryCache { registry, stamp };
        Ok(())
    }

    /// Current registry, reloaded when its files have changed on disk.
    pub fn registry(&self) -> Registry {
        let stamp = registry_stamp(&self.config.registry_dir);
        if self.registry.read().unwrap().stamp != stamp {
            if let Err(e) = self.reload_registry() {
                eprintln!("registry reload failed, keeping previous: {e}");
            }
        }
        self.registry.read().unwrap().registry.clone()
    }

    pub(crate) fn authenticate(&self, token: &str) -> Option<(Principal, TagSet)> {
        let reg = self.registry();
        let p = reg.by_token(token)?.clone();
        Some((p, reg.tags))
    }

    pub(crate) fn readable(&self, label: &Label, principal: &Principal, tags: &TagSet) -> bool {
        can_flow(label, principal, tags, self.clock().now())
    }

    pub fn run_state(&self, run_id: &str) -> Option<RunState> {
        self.runs.read().unwrap().get(run_id).map(|e| e.state.clone())
    }

    /// Waits until a submitted run leaves the running state.
    pub async fn wait_run(&self, run_id: &str) -> Option<RunState> {
        loop {
            match self.run_state(run_id)? {
                RunState::Running => tokio::time::sleep(Duration::from_millis(5)).await,
                done => return Some(done),
            }
        }
    }
}

/// Binds `addr` and serves until the process exits, polling subscribed
/// layers for new commits in the background.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let poller = service.clone();
    tokio::spawn(async move {
        loop {
            tokio::time::sleep(poller.config.poll_interval).await;
            if let Err(e) = poller.poll_commits().await {
                eprintln!("subscription poll failed: {e}");
            }
        }
    });
    axum::serve(listener, router(service)).await?;
    Ok(())
}
