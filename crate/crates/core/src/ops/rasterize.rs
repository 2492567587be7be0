use std::collections::BTreeMap;

use super::zonal::check_lonlat;
use super::{derived_layer, Geometry, OpError};
use crate::geo::TILE_SIZE;
use crate::ingest::points::{PointRecord, PointSet};
use crate::store::{Chunk, DType, LayerVersion, Store, TileKey};

/// NODATA of count rasters: padding and suppressed cells.
pub const COUNT_NODATA: f64 = -1.0;

/// Pixel holding a point, if it falls inside the raster.
pub(crate) fn bin(geom: &Geometry, lon: f64, lat: f64) -> Option<(u32, u32)> {
    let (fc, fr) = geom.affine.world_to_pixel(lon, lat);
    let (c, r) = (fc.floor(), fr.floor());
    let inside = c >= 0.0 && r >= 0.0 && c < geom.width as f64 && r < geom.height as f64;
    inside.then_some((c as u32, r as u32))
}

/// Point counts for one tile; cells with `0 < count < k` become NODATA.
pub fn rasterize_tile(points: &[PointRecord], geom: &Geometry, tx: u32, ty: u32, k: u32) -> Chunk {
    let (c0, r0, w, h) = geom.grid().tile_window(tx, ty);
    let mut counts = vec![0u64; (TILE_SIZE * TILE_SIZE) as usize];
    for p in points {
        if let Some((c, r)) = bin(geom, p.lon, p.lat) {
            if c >= c0 && c < c0 + w && r >= r0 && r < r0 + h {
                counts[((r - r0) * TILE_SIZE + (c - c0)) as usize] += 1;
            }
        }
    }
    let mut chunk = Chunk::filled(DType::I32, Some(COUNT_NODATA), COUNT_NODATA);
    for row in 0..h {
        for col in 0..w {
            let n = counts[(row * TILE_SIZE + col) as usize];
            let v = if n > 0 && n < k as u64 { COUNT_NODATA } else { n.min(i32::MAX as u64) as f64 };
            chunk.set(col, row, v);
        }
    }
    chunk
}

/// Bins points onto a lon/lat template grid with small-count suppression.
/// The output keeps the points' label.
pub fn rasterize_points(
    store: &Store,
    points: &PointSet,
    template: &Geometry,
    k: u32,
    name: &str,
) -> Result<LayerVersion, OpError> {
    if k == 0 {
        return Err(OpError::InvalidParam("min_count must be at least 1".into()));
    }
    check_lonlat(template.crs)?;
    template.validate()?;
    let mut chunks = BTreeMap::new();
    for (tx, ty) in template.grid().tiles() {
        let chunk = rasterize_tile(&points.records, template, tx, ty, k);
        chunks.insert(TileKey::new(1, tx, ty), store.put_chunk(&chunk)?);
    }
    Ok(derived_layer(
        name,
        template,
        DType::I32,
        Some(COUNT_NODATA),
        1,
        &points.time_stamp,
        points.label.clone(),
        chunks,
    ))
}
