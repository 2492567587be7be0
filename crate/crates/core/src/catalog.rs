//! Named datasets: resolving refs and version selectors to stored manifests.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::canonical::Digest;
use crate::difc::Label;
use crate::ingest::points::PointSet;
use crate::ingest::polygons::PolygonSet;
use crate::store::{Commit, LayerVersion, Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("version {version} is not a version of {name}")]
    UnknownVersion { name: String, version: Digest },
    #[error("object {0} is not a dataset manifest")]
    NotAManifest(Digest),
}

/// Either the latest committed version or a pinned manifest hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VersionSelector {
    Latest,
    Pinned(Digest),
}

impl fmt::Display for VersionSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionSelector::Latest => f.write_str("latest"),
            VersionSelector::Pinned(d) => d.fmt(f),
        }
    }
}

impl FromStr for VersionSelector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "latest" {
            return Ok(VersionSelector::Latest);
        }
        Digest::from_hex(s)
            .map(VersionSelector::Pinned)
            .map_err(|_| format!("version must be \"latest\" or a manifest hash, got {s:?}"))
    }
}

impl Serialize for VersionSelector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VersionSelector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Raster(LayerVersion),
    Points(PointSet),
    Polygons(PolygonSet),
}

impl Dataset {
    pub fn label(&self) -> &Label {
        match self {
            Dataset::Raster(l) => &l.label,
            Dataset::Points(p) => &p.label,
            Dataset::Polygons(p) => &p.label,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Dataset::Raster(l) => &l.layer_name,
            Dataset::Points(p) => &p.name,
            Dataset::Polygons(p) => &p.name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Dataset::Raster(_) => "raster",
            Dataset::Points(_) => "points",
            Dataset::Polygons(_) => "polygons",
        }
    }

    pub fn time_stamp(&self) -> &str {
        match self {
            Dataset::Raster(l) => &l.time_stamp,
            Dataset::Points(p) => &p.time_stamp,
            Dataset::Polygons(p) => &p.time_stamp,
        }
    }

    pub fn as_raster(&self) -> Option<&LayerVersion> {
        match self {
            Dataset::Raster(l) => Some(l),
            _ => None,
        }
    }
}

/// Loads any manifest object, dispatching on its `kind` field.
pub fn load_dataset(store: &Store, digest: &Digest) -> Result<Dataset, CatalogError> {
    let value = store.get_json_value(digest)?;
    let kind = value.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
    let parsed = match kind.as_str() {
        "raster" => serde_json::from_value(value).map(Dataset::Raster),
        "points" => serde_json::from_value(value).map(Dataset::Points),
        "polygons" => serde_json::from_value(value).map(Dataset::Polygons),
        _ => return Err(CatalogError::NotAManifest(*digest)),
    };
    parsed.map_err(|_| CatalogError::NotAManifest(*digest))
}

/// Resolves a name and selector to a manifest hash and its dataset. Pinned
/// hashes must belong to the named dataset.
pub fn resolve(
    store: &Store,
    name: &str,
    selector: VersionSelector,
) -> Result<(Digest, Dataset), CatalogError> {
    let digest = match selector {
        VersionSelector::Latest => {
            let head = store
                .read_ref(name)
                .ok()
                .flatten()
                .ok_or_else(|| CatalogError::UnknownDataset(name.to_string()))?;
            let commit = store.get_commit(&head)?;
            *commit
                .layer_versions
                .first()
                .ok_or_else(|| CatalogError::UnknownDataset(name.to_string()))?
        }
        VersionSelector::Pinned(d) => d,
    };
    let ds = match load_dataset(store, &digest) {
        Err(CatalogError::Store(StoreError::MissingObject(_))) | Err(CatalogError::NotAManifest(_)) => {
            return Err(CatalogError::UnknownVersion { name: name.to_string(), version: digest })
        }
        other => other?,
    };
    if ds.name() != name {
        return Err(CatalogError::UnknownVersion { name: name.to_string(), version: digest });
    }
    Ok((digest, ds))
}

/// Stores a dataset manifest and advances its ref by one commit.
pub fn commit_dataset(
    store: &Store,
    dataset: &Dataset,
    message: &str,
    created_at: String,
) -> Result<(Digest, Digest), CatalogError> {
    let name = dataset.name();
    let parent = store.read_ref(name)?;
    let (commit_hash, commit) = match dataset {
        Dataset::Raster(l) => store.commit_layer(l, parent, message, created_at)?,
        Dataset::Points(p) => {
            let m = store.put_json(p)?;
            let c = Commit::new(parent, vec![m], message, created_at);
            (store.put_json(&c)?, c)
        }
        Dataset::Polygons(p) => {
            let m = store.put_json(p)?;
            let c = Commit::new(parent, vec![m], message, created_at);
            (store.put_json(&c)?, c)
        }
    };
    store.update_ref(name, parent, commit_hash)?;
    Ok((commit.layer_versions[0], commit_hash))
}

/// Manifest hashes of every committed version of a dataset, newest first.
pub fn versions(store: &Store, name: &str) -> Result<Vec<(Digest, Commit)>, CatalogError> {
    let history = store.history(name)?;
    if history.is_empty() {
        return Err(CatalogError::UnknownDataset(name.to_string()));
    }
    Ok(history
        .into_iter()
        .filter_map(|(_, c)| c.layer_versions.first().copied().map(|m| (m, c)))
        .collect())
}
