//! Normalizing external files into labeled, committed datasets.

pub mod geotiff;
pub mod points;
pub mod polygons;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use chrono::{DateTime, SecondsFormat, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::Digest;
use crate::catalog::{commit_dataset, CatalogError, Dataset};
use crate::difc::Label;
use crate::geo::{TileGrid, TILE_SIZE};
use crate::store::{valid_name, Chunk, LayerVersion, RasterKind, Store, StoreError, TileKey};

use geotiff::{Raster, TiffError};
use points::{CsvError, PointSet, PointsKind};
use polygons::{GeoJsonError, PolygonSet, PolygonsKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Geotiff,
    PointsCsv,
    GeojsonPolygons,
}

#[derive(Debug, Clone)]
pub struct IngestSpec {
    pub layer_name: String,
    pub source_path: PathBuf,
    pub source_kind: SourceKind,
    pub label: Label,
    pub time_stamp: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid dataset name {0:?}")]
    InvalidName(String),
    #[error("file does not look like {0:?} input")]
    KindMismatch(SourceKind),
    #[error(transparent)]
    Tiff(#[from] TiffError),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error(transparent)]
    GeoJson(#[from] GeoJsonError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

/// Outcome of a committed import.
#[derive(Debug, Clone)]
pub struct Imported {
    pub dataset: Dataset,
    pub manifest: Digest,
    pub commit: Digest,
    /// SHA-256 of the source file bytes.
    pub source_digest: Digest,
}

/// Source lineage stored for every ingested object; provenance trees end here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRecord {
    pub kind: String,
    pub dataset: String,
    pub source_digest: Digest,
    pub label: Label,
    /// `band/tile_x/tile_y` for raster chunks.
    #[serde(default)]
    pub tile: Option<TileKey>,
}

pub fn utc_string(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn read_source(spec: &IngestSpec) -> Result<Vec<u8>, IngestError> {
    if !valid_name(&spec.layer_name) {
        return Err(IngestError::InvalidName(spec.layer_name.clone()));
    }
    fs::read(&spec.source_path).map_err(|source| IngestError::Read {
        path: spec.source_path.clone(),
        source,
    })
}

fn record_leaf(store: &Store, object: &Digest, record: &IngestRecord) -> Result<(), StoreError> {
    let rec = store.put_json(record)?;
    store.prov_put(object, &rec)
}

/// Splits a decoded raster into padded 1024x1024 chunks and builds the
/// (not yet stored) manifest. Edge tiles are padded with NODATA, or with 0
/// when the source declares none.
pub fn tile_raster(
    store: &Store,
    raster: &Raster,
    layer_name: &str,
    label: &Label,
    time_stamp: &str,
) -> Result<LayerVersion, StoreError> {
    let grid = TileGrid::new(raster.width, raster.height);
    let pad = raster.nodata.unwrap_or(0.0);
    let keys: Vec<TileKey> = (1..=raster.bands.len() as u32)
        .flat_map(|b| grid.tiles().map(move |(tx, ty)| TileKey::new(b, tx, ty)))
        .collect();
    let refs: Vec<(TileKey, _)> = keys
        .par_iter()
        .map(|key| {
            let band = &raster.bands[key.band as usize - 1];
            let mut chunk = Chunk::filled(raster.dtype, raster.nodata, pad);
            let (c0, r0, w, h) = grid.tile_window(key.tile_x, key.tile_y);
            for row in 0..h {
                let src = ((r0 + row) * raster.width + c0) as usize;
                let dst = (row * TILE_SIZE) as usize;
                chunk.values[dst..dst + w as usize].copy_from_slice(&band[src..src + w as usize]);
            }
            store.put_chunk(&chunk).map(|r| (*key, r))
        })
        .collect::<Result<_, _>>()?;
    Ok(LayerVersion {
        kind: RasterKind::Raster,
        layer_name: layer_name.to_string(),
        crs: raster.crs,
        affine: raster.affine,
        width: raster.width,
        height: raster.height,
        dtype: raster.dtype,
        nodata: raster.nodata,
        band_count: raster.bands.len() as u32,
        time_stamp: time_stamp.to_string(),
        label: label.clone(),
        chunks: refs.into_iter().collect::<BTreeMap<_, _>>(),
    })
}

/// Commits an in-memory raster as a new version of `layer_name`.
pub fn commit_raster(
    store: &Store,
    raster: &Raster,
    layer_name: &str,
    label: &Label,
    time_stamp: DateTime<Utc>,
    source_digest: Digest,
    created_at: DateTime<Utc>,
) -> Result<Imported, IngestError> {
    if !valid_name(layer_name) {
        return Err(IngestError::InvalidName(layer_name.to_string()));
    }
    let version = tile_raster(store, raster, layer_name, label, &utc_string(time_stamp))?;
    for (key, chunk) in &version.chunks {
        let record = IngestRecord {
            kind: "ingest".into(),
            dataset: layer_name.to_string(),
            source_digest,
            label: label.clone(),
            tile: Some(*key),
        };
        record_leaf(store, &chunk.0, &record)?;
    }
    let dataset = Dataset::Raster(version);
    let (manifest, commit) = commit_dataset(store, &dataset, "ingest geotiff", utc_string(created_at))?;
    Ok(Imported { dataset, manifest, commit, source_digest })
}

pub fn import_geotiff(
    store: &Store,
    spec: &IngestSpec,
    created_at: DateTime<Utc>,
) -> Result<Imported, IngestError> {
    let bytes = read_source(spec)?;
    if !bytes.starts_with(b"II") && !bytes.starts_with(b"MM") {
        return Err(IngestError::KindMismatch(SourceKind::Geotiff));
    }
    let raster = geotiff::decode(&bytes)?;
    commit_raster(
        store,
        &raster,
        &spec.layer_name,
        &spec.label,
        spec.time_stamp,
        Digest::of(&bytes),
        created_at,
    )
}

pub fn import_points_csv(
    store: &Store,
    spec: &IngestSpec,
    created_at: DateTime<Utc>,
) -> Result<Imported, IngestError> {
    let bytes = read_source(spec)?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| IngestError::KindMismatch(SourceKind::PointsCsv))?;
    let records = points::parse_points_csv(&text)?;
    let set = PointSet {
        kind: PointsKind::Points,
        name: spec.layer_name.clone(),
        time_stamp: utc_string(spec.time_stamp),
        label: spec.label.clone(),
        records,
    };
    commit_vector(store, Dataset::Points(set), Digest::of(&bytes), created_at)
}

pub fn import_geojson_polygons(
    store: &Store,
    spec: &IngestSpec,
    created_at: DateTime<Utc>,
) -> Result<Imported, IngestError> {
    let bytes = read_source(spec)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| IngestError::KindMismatch(SourceKind::GeojsonPolygons))?;
    let zones = polygons::parse_geojson_polygons(&text)?;
    let set = PolygonSet {
        kind: PolygonsKind::Polygons,
        name: spec.layer_name.clone(),
        time_stamp: utc_string(spec.time_stamp),
        label: spec.label.clone(),
        zones,
    };
    commit_vector(store, Dataset::Polygons(set), Digest::of(&bytes), created_at)
}

/// Commits a point or polygon set built in memory.
pub fn commit_vector(
    store: &Store,
    dataset: Dataset,
    source_digest: Digest,
    created_at: DateTime<Utc>,
) -> Result<Imported, IngestError> {
    if !valid_name(dataset.name()) {
        return Err(IngestError::InvalidName(dataset.name().to_string()));
    }
    let message = format!("ingest {}", dataset.kind());
    let (manifest, commit) = commit_dataset(store, &dataset, &message, utc_string(created_at))?;
    let record = IngestRecord {
        kind: "ingest".into(),
        dataset: dataset.name().to_string(),
        source_digest,
        label: dataset.label().clone(),
        tile: None,
    };
    record_leaf(store, &manifest, &record)?;
    Ok(Imported { dataset, manifest, commit, source_digest })
}

pub fn import(store: &Store, spec: &IngestSpec, created_at: DateTime<Utc>) -> Result<Imported, IngestError> {
    match spec.source_kind {
        SourceKind::Geotiff => import_geotiff(store, spec, created_at),
        SourceKind::PointsCsv => import_points_csv(store, spec, created_at),
        SourceKind::GeojsonPolygons => import_geojson_polygons(store, spec, created_at),
    }
}
