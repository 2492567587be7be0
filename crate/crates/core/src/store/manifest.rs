use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{ChunkRef, DType, StoreError};
use crate::canonical::{canonical_digest, to_canonical_json, Digest};
use crate::difc::Label;
use crate::geo::{Affine, Crs, TileGrid};

/// Address of one chunk within a layer. Bands are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileKey {
    pub band: u32,
    pub tile_y: u32,
    pub tile_x: u32,
}

impl TileKey {
    pub fn new(band: u32, tile_x: u32, tile_y: u32) -> Self {
        TileKey { band, tile_x, tile_y }
    }
}

#[derive(Serialize, Deserialize)]
struct ChunkEntry {
    band: u32,
    tile_x: u32,
    tile_y: u32,
    chunk: ChunkRef,
}

mod chunk_map_serde {
    use super::*;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<TileKey, ChunkRef>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<ChunkEntry> = map
            .iter()
            .map(|(k, v)| ChunkEntry { band: k.band, tile_x: k.tile_x, tile_y: k.tile_y, chunk: *v })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<TileKey, ChunkRef>, D::Error> {
        let entries = Vec::<ChunkEntry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| (TileKey::new(e.band, e.tile_x, e.tile_y), e.chunk))
            .collect())
    }
}

/// Immutable, hash-identified version of a raster layer.
///
/// The manifest hash is the digest of the canonical JSON encoding, so equal
/// logical content always yields an equal hash regardless of how the chunk
/// map was assembled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerVersion {
    pub kind: RasterKind,
    pub layer_name: String,
    pub crs: Crs,
    pub affine: Affine,
    pub width: u32,
    pub height: u32,
    pub dtype: DType,
    pub nodata: Option<f64>,
    pub band_count: u32,
    pub time_stamp: String,
    pub label: Label,
    #[serde(with = "chunk_map_serde")]
    pub chunks: BTreeMap<TileKey, ChunkRef>,
}

/// Marker serialized as `"raster"` so manifests are self-describing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterKind {
    #[default]
    Raster,
}

impl LayerVersion {
    pub fn grid(&self) -> TileGrid {
        TileGrid::new(self.width, self.height)
    }

    pub fn manifest_bytes(&self) -> Vec<u8> {
        to_canonical_json(self).expect("manifest serializes")
    }

    pub fn manifest_hash(&self) -> Digest {
        canonical_digest(self).expect("manifest serializes")
    }

    pub fn chunk(&self, band: u32, tile_x: u32, tile_y: u32) -> Option<ChunkRef> {
        self.chunks.get(&TileKey::new(band, tile_x, tile_y)).copied()
    }

    /// The chunk map covers exactly the grid's tiles for every band.
    pub fn check_complete(&self) -> Result<(), StoreError> {
        let grid = self.grid();
        let expected = grid.tiles().count() * self.band_count as usize;
        let all_present = (1..=self.band_count)
            .all(|b| grid.tiles().all(|(tx, ty)| self.chunks.contains_key(&TileKey::new(b, tx, ty))));
        if self.chunks.len() != expected || !all_present {
            return Err(StoreError::IncompleteManifest(self.layer_name.clone()));
        }
        Ok(())
    }

    pub fn same_geometry(&self, other: &LayerVersion) -> bool {
        self.crs == other.crs
            && self.affine == other.affine
            && self.width == other.width
            && self.height == other.height
            && self.band_count == other.band_count
    }
}

/// Tiles whose chunk differs between two versions of the same geometry.
pub fn diff_versions(a: &LayerVersion, b: &LayerVersion) -> Result<Vec<TileKey>, StoreError> {
    if !a.same_geometry(b) {
        return Err(StoreError::GeometryMismatch);
    }
    let mut out: Vec<TileKey> = a
        .chunks
        .iter()
        .filter(|(k, r)| b.chunks.get(k) != Some(r))
        .map(|(k, _)| *k)
        .collect();
    out.extend(b.chunks.keys().filter(|k| !a.chunks.contains_key(k)));
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commit {
    pub parent: Option<Digest>,
    pub layer_versions: Vec<Digest>,
    pub message: String,
    pub created_at: String,
}

impl Commit {
    pub fn new(parent: Option<Digest>, mut layer_versions: Vec<Digest>, message: &str, created_at: String) -> Self {
        layer_versions.sort();
        layer_versions.dedup();
        Commit { parent, layer_versions, message: message.to_string(), created_at }
    }

    pub fn hash(&self) -> Digest {
        canonical_digest(self).expect("commit serializes")
    }
}
