use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{check_band, Geometry, OpError};
use crate::difc::Label;
use crate::geo::{Crs, GeoExtent, TILE_SIZE};
use crate::ingest::polygons::{zone_bbox, zone_contains, PolygonSet, Zone};
use crate::store::{Chunk, LayerVersion, Store, StoreError};

/// Partial statistics of one zone over one tile.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ZoneAcc {
    pub count: u64,
    pub sum: f64,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl ZoneAcc {
    fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.min = Some(self.min.map_or(v, |m| m.min(v)));
        self.max = Some(self.max.map_or(v, |m| m.max(v)));
    }

    fn merge(&mut self, other: &ZoneAcc) {
        self.count += other.count;
        self.sum += other.sum;
        self.min = match (self.min, other.min) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.max = match (self.max, other.max) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneStats {
    pub zone: String,
    pub count: u64,
    pub sum: Option<f64>,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZonalResult {
    pub label: Label,
    pub zones: Vec<ZoneStats>,
}

/// Inclusive pixel window that may hold pixel centers inside `bbox`, padded
/// by one pixel so boundary centers are never lost to rounding.
fn pixel_window(geom: &Geometry, bbox: &GeoExtent) -> Option<(u32, u32, u32, u32)> {
    let (ca, ra) = geom.affine.world_to_pixel(bbox.min_x, bbox.min_y);
    let (cb, rb) = geom.affine.world_to_pixel(bbox.max_x, bbox.max_y);
    let clip = |a: f64, b: f64, n: u32| -> Option<(u32, u32)> {
        let lo = (a.min(b) - 0.5).floor() - 1.0;
        let hi = (a.max(b) - 0.5).ceil() + 1.0;
        if hi < 0.0 || lo >= n as f64 {
            return None;
        }
        Some((lo.max(0.0) as u32, hi.min(n as f64 - 1.0) as u32))
    };
    let (c0, c1) = clip(ca, cb, geom.width)?;
    let (r0, r1) = clip(ra, rb, geom.height)?;
    Some((c0, c1, r0, r1))
}

/// Tiles that can contain a pixel center of some zone, sorted by `(ty, tx)`.
pub fn zonal_tiles(geom: &Geometry, zones: &[Zone]) -> Vec<(u32, u32)> {
    let mut tiles = BTreeSet::new();
    for zone in zones {
        let Some((c0, c1, r0, r1)) = zone_bbox(zone).and_then(|b| pixel_window(geom, &b)) else {
            continue;
        };
        for ty in r0 / TILE_SIZE..=r1 / TILE_SIZE {
            for tx in c0 / TILE_SIZE..=c1 / TILE_SIZE {
                tiles.insert((ty, tx));
            }
        }
    }
    tiles.into_iter().map(|(ty, tx)| (tx, ty)).collect()
}

/// Per-zone partials for tile `(tx, ty)`; padding and NODATA cells are skipped.
pub fn zonal_tile(chunk: &Chunk, geom: &Geometry, tx: u32, ty: u32, zones: &[Zone]) -> Vec<ZoneAcc> {
    let (tc0, tr0, tw, th) = geom.grid().tile_window(tx, ty);
    zones
        .iter()
        .map(|zone| {
            let mut acc = ZoneAcc::default();
            let Some((c0, c1, r0, r1)) = zone_bbox(zone).and_then(|b| pixel_window(geom, &b)) else {
                return acc;
            };
            let (c0, c1) = (c0.max(tc0), c1.min(tc0 + tw - 1));
            let (r0, r1) = (r0.max(tr0), r1.min(tr0 + th - 1));
            if c0 > c1 || r0 > r1 {
                return acc;
            }
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let v = chunk.get(col - tc0, row - tr0);
                    if v.is_nan() || chunk.is_nodata(v) {
                        continue;
                    }
                    let (x, y) = geom.pixel_center(col, row);
                    if zone_contains(zone, x, y) {
                        acc.push(v);
                    }
                }
            }
            acc
        })
        .collect()
}

/// Folds per-tile partials (in the given order) into final statistics.
pub fn zonal_combine(zones: &[Zone], partials: &[Vec<ZoneAcc>]) -> Vec<ZoneStats> {
    zones
        .iter()
        .enumerate()
        .map(|(i, zone)| {
            let mut acc = ZoneAcc::default();
            for p in partials {
                acc.merge(&p[i]);
            }
            let has = acc.count > 0;
            ZoneStats {
                zone: zone.id.clone(),
                count: acc.count,
                sum: has.then_some(acc.sum),
                mean: has.then(|| acc.sum / acc.count as f64),
                min: acc.min,
                max: acc.max,
            }
        })
        .collect()
}

pub(crate) fn check_lonlat(crs: Crs) -> Result<(), OpError> {
    if crs != Crs::Wgs84 {
        return Err(OpError::CrsMismatch { expected: 4326, found: crs.epsg() });
    }
    Ok(())
}

/// Pixel-center zonal statistics of one band over every zone.
pub fn zonal_stats(
    store: &Store,
    layer: &LayerVersion,
    band: u32,
    zones: &PolygonSet,
) -> Result<ZonalResult, OpError> {
    check_lonlat(layer.crs)?;
    check_band(layer, band)?;
    let geom = Geometry::of(layer);
    let mut partials = Vec::new();
    for (tx, ty) in zonal_tiles(&geom, &zones.zones) {
        let r = layer
            .chunk(band, tx, ty)
            .ok_or_else(|| StoreError::IncompleteManifest(layer.layer_name.clone()))?;
        let chunk = store.get_chunk(&r)?;
        partials.push(zonal_tile(&chunk, &geom, tx, ty, &zones.zones));
    }
    Ok(ZonalResult {
        label: layer.label.join(&zones.label),
        zones: zonal_combine(&zones.zones, &partials),
    })
}
