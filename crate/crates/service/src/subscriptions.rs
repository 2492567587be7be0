use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ark_core::catalog::{load_dataset, resolve, CatalogError, Dataset, VersionSelector};
use ark_core::difc::{can_flow, TagSet};
use ark_core::expr::parse;
use ark_core::geo::GeoExtent;
use ark_core::ops::{check_predicate, temporal_diff};
use ark_core::{Digest, LayerVersion, Principal};
use serde::{Deserialize, Serialize};

use crate::{ApiError, Service, ServiceError};

/// Retries after the first failed webhook attempt before dead-lettering.
pub const MAX_RETRIES: u32 = 3;

const PREDICATE_ALIASES: [&str; 2] = ["A", "B"];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubscriptionRequest {
    pub layer: String,
    pub aoi: GeoExtent,
    /// Expression over `A` (old version) and `B` (new version); nonzero means changed.
    pub predicate: String,
    pub webhook_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    pub id: String,
    pub layer_name: String,
    pub aoi: GeoExtent,
    pub predicate: String,
    pub webhook_url: String,
    pub principal: String,
    /// Version the next evaluation compares against.
    pub last_manifest: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebhookPayload {
    pub subscription_id: String,
    pub layer: String,
    pub old_manifest: Digest,
    pub new_manifest: Digest,
    pub changed_count: u64,
    pub aoi: GeoExtent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryStatus {
    Delivered,
    DeadLettered,
    /// The subscriber could no longer read the layer.
    Suppressed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub subscription_id: String,
    pub layer: String,
    pub old_manifest: Digest,
    pub new_manifest: Digest,
    pub changed_count: Option<u64>,
    pub status: DeliveryStatus,
    pub attempts: u32,
    pub at: String,
}

/// Subscriptions (rewritten on change) and the delivery log (append-only).
pub(crate) struct Book {
    dir: PathBuf,
    subs: BTreeMap<String, Subscription>,
    deliveries: Vec<Delivery>,
}

impl Book {
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        fs::create_dir_all(dir)?;
        let subs = match fs::read(dir.join("subscriptions.json")) {
            Ok(b) => serde_json::from_slice::<Vec<Subscription>>(&b)
                .map_err(|e| ServiceError::State(e.to_string()))?
                .into_iter()
                .map(|s| (s.id.clone(), s))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let deliveries = match fs::read_to_string(dir.join("deliveries.jsonl")) {
            Ok(text) => text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|e| ServiceError::State(e.to_string())))
                .collect::<Result<_, _>>()?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Book { dir: dir.to_path_buf(), subs, deliveries })
    }

    fn save(&self) -> Result<(), ServiceError> {
        let list: Vec<&Subscription> = self.subs.values().collect();
        let tmp = self.dir.join("subscriptions.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&list).map_err(|e| ServiceError::State(e.to_string()))?)?;
        fs::rename(tmp, self.dir.join("subscriptions.json"))?;
        Ok(())
    }

    fn append(&mut self, d: Delivery) -> Result<(), ServiceError> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.dir.join("deliveries.jsonl"))?;
        let mut line = serde_json::to_vec(&d).map_err(|e| ServiceError::State(e.to_string()))?;
        line.push(b'\n');
        f.write_all(&line)?;
        self.deliveries.push(d);
        Ok(())
    }
}

fn raster(ds: Dataset) -> Result<LayerVersion, ApiError> {
    match ds {
        Dataset::Raster(l) => Ok(l),
        other => Err(ApiError::Unprocessable(format!("{} is not a raster layer", other.name()))),
    }
}

impl Service {
    pub fn subscribe(&self, principal: &Principal, tags: &TagSet, req: SubscriptionRequest) -> Result<Subscription, ApiError> {
        let (manifest, ds) = resolve(self.store(), &req.layer, VersionSelector::Latest).map_err(|e| match e {
            CatalogError::UnknownDataset(_) => ApiError::NotFound,
            e => ApiError::internal(e),
        })?;
        if !self.readable(ds.label(), principal, tags) {
            return Err(ApiError::Forbidden);
        }
        let layer = raster(ds)?;
        let pred = parse(&req.predicate, &PREDICATE_ALIASES).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
        check_predicate(&pred, &layer, &layer).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
        let aoi = GeoExtent::new(req.aoi.min_x, req.aoi.min_y, req.aoi.max_x, req.aoi.max_y)
            .map_err(|e| ApiError::Unprocessable(e.to_string()))?;
        match reqwest::Url::parse(&req.webhook_url) {
            Ok(u) if matches!(u.scheme(), "http" | "https") => {}
            _ => return Err(ApiError::Unprocessable("webhook_url must be an http(s) URL".into())),
        }
        let sub = Subscription {
            id: uuid::Uuid::new_v4().to_string(),
            layer_name: req.layer,
            aoi,
            predicate: req.predicate,
            webhook_url: req.webhook_url,
            principal: principal.id.clone(),
            last_manifest: manifest,
        };
        let mut book = self.subs.lock().unwrap();
        book.subs.insert(sub.id.clone(), sub.clone());
        book.save().map_err(ApiError::internal)?;
        Ok(sub)
    }

    /// Only the owner may remove a subscription; anyone else sees 404.
    pub fn unsubscribe(&self, principal: &Principal, id: &str) -> Result<(), ApiError> {
        let mut book = self.subs.lock().unwrap();
        match book.subs.get(id) {
            Some(s) if s.principal == principal.id => {
                book.subs.remove(id);
                book.save().map_err(ApiError::internal)
            }
            _ => Err(ApiError::NotFound),
        }
    }

    pub fn subscriptions(&self) -> Vec<Subscription> {
        self.subs.lock().unwrap().subs.values().cloned().collect()
    }

    pub fn deliveries(&self) -> Vec<Delivery> {
        self.subs.lock().unwrap().deliveries.clone()
    }

    /// Evaluates every subscription whose layer has moved past the version it
    /// last saw.
    pub async fn poll_commits(&self) -> Result<Vec<Delivery>, ServiceError> {
        let _serial = self.notify_lock.lock().await;
        let layers: BTreeSet<String> = self.subscriptions().into_iter().map(|s| s.layer_name).collect();
        let mut out = Vec::new();
        for layer in layers {
            let latest = match resolve(self.store(), &layer, VersionSelector::Latest) {
                Ok((m, _)) => m,
                Err(CatalogError::UnknownDataset(_)) => continue,
                Err(e) => return Err(ServiceError::State(e.to_string())),
            };
            let stale: BTreeSet<Digest> = self
                .subscriptions()
                .into_iter()
                .filter(|s| s.layer_name == layer && s.last_manifest != latest)
                .map(|s| s.last_manifest)
                .collect();
            for old in stale {
                out.extend(self.notify_inner(&layer, old, latest, true).await?);
            }
        }
        Ok(out)
    }

    /// Evaluates every subscription on `layer` for the change `old` to `new`
    /// and delivers webhooks where anything changed inside the AOI.
    pub async fn notify_subscribers(&self, layer: &str, old: Digest, new: Digest) -> Result<Vec<Delivery>, ServiceError> {
        let _serial = self.notify_lock.lock().await;
        self.notify_inner(layer, old, new, false).await
    }

    async fn notify_inner(&self, layer: &str, old: Digest, new: Digest, from_cursor: bool) -> Result<Vec<Delivery>, ServiceError> {
        let subs: Vec<Subscription> = self
            .subscriptions()
            .into_iter()
            .filter(|s| s.layer_name == layer && (!from_cursor || s.last_manifest == old))
            .collect();
        if subs.is_empty() {
            return Ok(Vec::new());
        }
        let load = |d: &Digest| match load_dataset(self.store(), d) {
            Ok(Dataset::Raster(l)) => Ok(l),
            Ok(_) => Err(ServiceError::State(format!("{d} is not a raster manifest"))),
            Err(e) => Err(ServiceError::State(e.to_string())),
        };
        let (a, b) = (load(&old)?, load(&new)?);
        let label = a.label.join(&b.label);
        let mut out = Vec::new();
        for sub in subs {
            let registry = self.registry();
            let at = self.clock().now();
            let allowed = registry.principal(&sub.principal).is_some_and(|p| can_flow(&label, p, &registry.tags, at));
            let record = |changed_count, status, attempts| Delivery {
                subscription_id: sub.id.clone(),
                layer: layer.to_string(),
                old_manifest: old,
                new_manifest: new,
                changed_count,
                status,
                attempts,
                at: at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            };
            let delivery = if !allowed {
                Some(record(None, DeliveryStatus::Suppressed, 0))
            } else {
                match self.changed_cells(&sub, &a, &b).await {
                    Ok(0) => None,
                    Ok(n) => {
                        let payload = WebhookPayload {
                            subscription_id: sub.id.clone(),
                            layer: layer.to_string(),
                            old_manifest: old,
                            new_manifest: new,
                            changed_count: n,
                            aoi: sub.aoi,
                        };
                        let (status, attempts) = self.deliver(&sub.webhook_url, &payload).await;
                        Some(record(Some(n), status, attempts))
                    }
                    Err(e) => {
                        eprintln!("subscription {} could not be evaluated: {e}", sub.id);
                        None
                    }
                }
            };
            let mut book = self.subs.lock().unwrap();
            if let Some(d) = delivery {
                book.append(d.clone())?;
                out.push(d);
            }
            if let Some(s) = book.subs.get_mut(&sub.id) {
                s.last_manifest = new;
            }
            book.save()?;
        }
        Ok(out)
    }

    async fn changed_cells(&self, sub: &Subscription, a: &LayerVersion, b: &LayerVersion) -> Result<u64, String> {
        let pred = parse(&sub.predicate, &PREDICATE_ALIASES).map_err(|e| e.to_string())?;
        let (store, a, b, aoi) = (self.store().clone(), a.clone(), b.clone(), sub.aoi);
        let name = format!("subscription-{}", sub.id);
        tokio::task::spawn_blocking(move || temporal_diff(&store, &a, &b, &pred, Some(&aoi), &name))
            .await
            .map_err(|e| e.to_string())?
            .map(|r| r.changed_count)
            .map_err(|e| e.to_string())
    }

    /// POSTs `payload`, retrying with exponential backoff. Any 2xx counts as delivered.
    async fn deliver(&self, url: &str, payload: &WebhookPayload) -> (DeliveryStatus, u32) {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let ok = match self.http.post(url).json(payload).send().await {
                Ok(r) => r.status().is_success(),
                Err(_) => false,
            };
            if ok {
                return (DeliveryStatus::Delivered, attempts);
            }
            if attempts > MAX_RETRIES {
                return (DeliveryStatus::DeadLettered, attempts);
            }
            tokio::time::sleep(self.config().retry_base * 2u32.pow(attempts - 1)).await;
        }
    }
}
