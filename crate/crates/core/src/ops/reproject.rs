use std::collections::{BTreeMap, BTreeSet};

use super::{derived_layer, Geometry, OpError};
use crate::geo::TILE_SIZE;
use crate::store::{Chunk, DType, LayerVersion, Store, StoreError, TileKey};

/// Source pixel lookup tables for nearest-neighbour resampling. Both
/// supported projections are separable, so a destination column maps to one
/// source column for every row (and likewise for rows).
#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectIndex {
    pub src: Geometry,
    pub dst: Geometry,
    cols: Vec<Option<u32>>,
    rows: Vec<Option<u32>>,
}

fn nearest(f: f64, n: u32) -> Option<u32> {
    let i = f.floor();
    (i >= 0.0 && i < n as f64).then_some(i as u32)
}

impl ReprojectIndex {
    pub fn new(src: &Geometry, dst: &Geometry) -> Result<Self, OpError> {
        src.validate()?;
        dst.validate()?;
        let cols = (0..dst.width)
            .map(|c| {
                let (x, _) = dst.pixel_center(c, 0);
                let sx = dst.crs.transform_to(src.crs, x, 0.0).ok()?.0;
                nearest(src.affine.world_to_pixel(sx, src.affine.origin_y).0, src.width)
            })
            .collect();
        let rows = (0..dst.height)
            .map(|r| {
                let (_, y) = dst.pixel_center(0, r);
                let sy = dst.crs.transform_to(src.crs, 0.0, y).ok()?.1;
                nearest(src.affine.world_to_pixel(src.affine.origin_x, sy).1, src.height)
            })
            .collect();
        Ok(ReprojectIndex { src: *src, dst: *dst, cols, rows })
    }

    /// Source pixel feeding destination pixel `(col, row)`.
    pub fn source_pixel(&self, col: u32, row: u32) -> Option<(u32, u32)> {
        Some((self.cols[col as usize]?, self.rows[row as usize]?))
    }

    /// Source tiles read by destination tile `(tx, ty)`, sorted by `(ty, tx)`.
    pub fn source_tiles(&self, tx: u32, ty: u32) -> Vec<(u32, u32)> {
        let (c0, r0, w, h) = self.dst.grid().tile_window(tx, ty);
        let txs: BTreeSet<u32> = self.cols[c0 as usize..(c0 + w) as usize].iter().flatten().map(|c| c / TILE_SIZE).collect();
        let tys: BTreeSet<u32> = self.rows[r0 as usize..(r0 + h) as usize].iter().flatten().map(|r| r / TILE_SIZE).collect();
        tys.iter().flat_map(|&y| txs.iter().map(move |&x| (x, y))).collect()
    }
}

/// NODATA used by reprojected outputs.
pub fn reproject_nodata(src: &LayerVersion) -> f64 {
    src.nodata.unwrap_or_else(|| src.dtype.default_nodata())
}

/// One destination tile; `sources` must hold every tile from
/// [`ReprojectIndex::source_tiles`].
pub fn reproject_tile(
    index: &ReprojectIndex,
    sources: &BTreeMap<(u32, u32), &Chunk>,
    tx: u32,
    ty: u32,
    dtype: DType,
    nodata: f64,
) -> Chunk {
    let (c0, r0, w, h) = index.dst.grid().tile_window(tx, ty);
    let mut out = Chunk::filled(dtype, Some(nodata), nodata);
    for row in 0..h {
        let Some(sr) = index.rows[(r0 + row) as usize] else { continue };
        for col in 0..w {
            let Some(sc) = index.cols[(c0 + col) as usize] else { continue };
            let src = sources[&(sc / TILE_SIZE, sr / TILE_SIZE)];
            out.set(col, row, src.get(sc % TILE_SIZE, sr % TILE_SIZE));
        }
    }
    out
}

/// Resamples every band of `src` onto `dst` by nearest neighbour.
pub fn reproject_nearest(
    store: &Store,
    src: &LayerVersion,
    dst: &Geometry,
    name: &str,
) -> Result<LayerVersion, OpError> {
    let index = ReprojectIndex::new(&Geometry::of(src), dst)?;
    let nodata = reproject_nodata(src);
    let mut chunks = BTreeMap::new();
    for band in 1..=src.band_count {
        for (tx, ty) in dst.grid().tiles() {
            let mut loaded = BTreeMap::new();
            for (sx, sy) in index.source_tiles(tx, ty) {
                let r = src
                    .chunk(band, sx, sy)
                    .ok_or_else(|| StoreError::IncompleteManifest(src.layer_name.clone()))?;
                loaded.insert((sx, sy), store.get_chunk(&r)?);
            }
            let refs = loaded.iter().map(|(k, v)| (*k, v)).collect();
            let chunk = reproject_tile(&index, &refs, tx, ty, src.dtype, nodata);
            chunks.insert(TileKey::new(band, tx, ty), store.put_chunk(&chunk)?);
        }
    }
    Ok(derived_layer(
        name,
        dst,
        src.dtype,
        Some(nodata),
        src.band_count,
        &src.time_stamp,
        src.label.clone(),
        chunks,
    ))
}
