use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{check_band, derived_layer, latest_time, Geometry, OpError};
use crate::expr::{eval_chunk, BandRef, ExprProgram, OUTPUT_NODATA};
use crate::geo::{tiles_covering, GeoExtent};
use crate::store::{Chunk, DType, LayerVersion, Store, StoreError, TileKey};

/// NODATA of change masks.
pub const MASK_NODATA: f64 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffResult {
    pub mask: LayerVersion,
    pub changed_count: u64,
}

/// Per-tile record stored for change-count reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffPartial {
    pub changed: u64,
}

/// Tiles that can hold a pixel center inside `aoi` (all tiles without one).
pub fn diff_tiles(geom: &Geometry, aoi: Option<&GeoExtent>) -> Vec<(u32, u32)> {
    match aoi {
        Some(e) => tiles_covering(&geom.grid(), e, &geom.affine),
        None => geom.grid().tiles().collect(),
    }
}

/// A mask tile that lies wholly outside the area of interest.
pub fn empty_mask() -> Chunk {
    Chunk::filled(DType::U8, Some(MASK_NODATA), MASK_NODATA)
}

/// Change mask for one tile: 1 where the predicate is nonzero, 0 where zero,
/// NODATA where any referenced input is NODATA, outside `aoi`, or in padding.
pub fn diff_tile(
    pred: &ExprProgram,
    inputs: &BTreeMap<BandRef, &Chunk>,
    geom: &Geometry,
    tx: u32,
    ty: u32,
    aoi: Option<&GeoExtent>,
) -> Result<(Chunk, u64), OpError> {
    let values = eval_chunk(pred, inputs)?;
    let (c0, r0, w, h) = geom.grid().tile_window(tx, ty);
    let mut mask = empty_mask();
    let mut changed = 0;
    for row in 0..h {
        for col in 0..w {
            if let Some(e) = aoi {
                let (x, y) = geom.pixel_center(c0 + col, r0 + row);
                if !e.contains(x, y) {
                    continue;
                }
            }
            let i = (row * values.width + col) as usize;
            let missing = inputs.values().any(|c| {
                let v = c.values[i];
                v.is_nan() || c.is_nodata(v)
            });
            let v = values.values[i];
            if missing || v == OUTPUT_NODATA {
                continue;
            }
            let bit = if v != 0.0 { 1.0 } else { 0.0 };
            changed += bit as u64;
            mask.set(col, row, bit);
        }
    }
    Ok((mask, changed))
}

/// Checks that `pred` only reads bands that exist in `a` (alias A) and `b` (alias B).
pub fn check_predicate(pred: &ExprProgram, a: &LayerVersion, b: &LayerVersion) -> Result<(), OpError> {
    for r in pred.bands() {
        match r.alias.as_str() {
            "A" => check_band(a, r.band)?,
            "B" => check_band(b, r.band)?,
            other => return Err(OpError::InvalidParam(format!("predicate may only read A and B, not {other}"))),
        }
    }
    Ok(())
}

/// Cell-wise change detection between two versions on one grid.
pub fn temporal_diff(
    store: &Store,
    a: &LayerVersion,
    b: &LayerVersion,
    pred: &ExprProgram,
    aoi: Option<&GeoExtent>,
    name: &str,
) -> Result<DiffResult, OpError> {
    if !a.same_geometry(b) {
        return Err(OpError::GeometryMismatch);
    }
    check_predicate(pred, a, b)?;
    let geom = Geometry::of(a);
    let active: Vec<(u32, u32)> = diff_tiles(&geom, aoi);
    let mut chunks = BTreeMap::new();
    let mut changed_count = 0;
    for (tx, ty) in geom.grid().tiles() {
        let mask = if active.contains(&(tx, ty)) {
            let mut loaded = BTreeMap::new();
            for r in pred.bands() {
                let layer = if r.alias == "A" { a } else { b };
                let cref = layer
                    .chunk(r.band, tx, ty)
                    .ok_or_else(|| StoreError::IncompleteManifest(layer.layer_name.clone()))?;
                loaded.insert(r, store.get_chunk(&cref)?);
            }
            let inputs = loaded.iter().map(|(k, v)| (k.clone(), v)).collect();
            let (mask, n) = diff_tile(pred, &inputs, &geom, tx, ty, aoi)?;
            changed_count += n;
            mask
        } else {
            empty_mask()
        };
        chunks.insert(TileKey::new(1, tx, ty), store.put_chunk(&mask)?);
    }
    let mask = derived_layer(
        name,
        &geom,
        DType::U8,
        Some(MASK_NODATA),
        1,
        &latest_time([a.time_stamp.as_str(), b.time_stamp.as_str()]),
        a.label.join(&b.label),
        chunks,
    );
    Ok(DiffResult { mask, changed_count })
}
