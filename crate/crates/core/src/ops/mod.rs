//! Built-in spatial operations, each split into a per-tile kernel and a
//! whole-layer driver built from those kernels.

mod diff;
mod rasterize;
mod reproject;
mod zonal;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::difc::Label;
use crate::expr::ExprError;
use crate::geo::{Affine, Crs, GeoError, TileGrid, TILE_SIZE};
use crate::store::{Chunk, ChunkRef, DType, LayerVersion, RasterKind, Store, StoreError, TileKey};

pub use diff::{
    check_predicate, diff_tile, diff_tiles, empty_mask, temporal_diff, DiffPartial, DiffResult, MASK_NODATA,
};
pub use rasterize::{rasterize_points, rasterize_tile, COUNT_NODATA};
pub(crate) use zonal::check_lonlat;
pub use reproject::{reproject_nearest, reproject_nodata, reproject_tile, ReprojectIndex};
pub use zonal::{zonal_combine, zonal_stats, zonal_tile, zonal_tiles, ZonalResult, ZoneAcc, ZoneStats};

/// Semantic versions folded into memo keys; bump when results change.
pub mod versions {
    pub const EXPR: &str = "expr/1";
    pub const ZONAL_STATS: &str = "zonal_stats/1";
    pub const RASTERIZE_POINTS: &str = "rasterize_points/1";
    pub const TEMPORAL_DIFF: &str = "temporal_diff/1";
    pub const REPROJECT_NEAREST: &str = "reproject_nearest/1";
}

#[derive(Debug, thiserror::Error)]
pub enum OpError {
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("expected EPSG:{expected}, found EPSG:{found}")]
    CrsMismatch { expected: u32, found: u32 },
    #[error("inputs do not share one grid geometry")]
    GeometryMismatch,
    #[error("band {band} out of range (layer has {count})")]
    BandOutOfRange { band: u32, count: u32 },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Grid geometry of a raster: CRS, geotransform and size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub crs: Crs,
    pub affine: Affine,
    pub width: u32,
    pub height: u32,
}

impl Geometry {
    pub fn of(layer: &LayerVersion) -> Self {
        Geometry { crs: layer.crs, affine: layer.affine, width: layer.width, height: layer.height }
    }

    pub fn grid(&self) -> TileGrid {
        TileGrid::new(self.width, self.height)
    }

    /// World coordinates of the center of pixel `(col, row)`.
    pub fn pixel_center(&self, col: u32, row: u32) -> (f64, f64) {
        self.affine.pixel_to_world(col as f64 + 0.5, row as f64 + 0.5)
    }

    pub fn validate(&self) -> Result<(), OpError> {
        Affine::new(self.affine.origin_x, self.affine.origin_y, self.affine.pixel_w, self.affine.pixel_h)?;
        if self.width == 0 || self.height == 0 {
            return Err(OpError::InvalidParam("raster size must be positive".into()));
        }
        Ok(())
    }
}

pub fn check_band(layer: &LayerVersion, band: u32) -> Result<(), OpError> {
    if band == 0 || band > layer.band_count {
        return Err(OpError::BandOutOfRange { band, count: layer.band_count });
    }
    Ok(())
}

/// Overwrites the padding region of an edge tile with `fill`.
pub fn mask_padding(chunk: &mut Chunk, grid: &TileGrid, tx: u32, ty: u32, fill: f64) {
    let (_, _, w, h) = grid.tile_window(tx, ty);
    for row in 0..chunk.height {
        for col in 0..chunk.width {
            if row >= h || col >= w {
                chunk.set(col, row, fill);
            }
        }
    }
}

/// Builds an unstored manifest for a derived raster.
#[allow(clippy::too_many_arguments)]
pub fn derived_layer(
    name: &str,
    geom: &Geometry,
    dtype: DType,
    nodata: Option<f64>,
    band_count: u32,
    time_stamp: &str,
    label: Label,
    chunks: BTreeMap<TileKey, ChunkRef>,
) -> LayerVersion {
    LayerVersion {
        kind: RasterKind::Raster,
        layer_name: name.to_string(),
        crs: geom.crs,
        affine: geom.affine,
        width: geom.width,
        height: geom.height,
        dtype,
        nodata,
        band_count,
        time_stamp: time_stamp.to_string(),
        label,
        chunks,
    }
}

/// Latest of several normalized UTC time stamps.
pub fn latest_time<'a, I: IntoIterator<Item = &'a str>>(stamps: I) -> String {
    stamps.into_iter().max().unwrap_or_default().to_string()
}

/// Reads one band of a layer into a row-major `width * height` vector,
/// dropping padding. NODATA cells keep their stored value.
pub fn read_band(store: &Store, layer: &LayerVersion, band: u32) -> Result<Vec<f64>, OpError> {
    check_band(layer, band)?;
    let grid = layer.grid();
    let mut out = vec![0.0; layer.width as usize * layer.height as usize];
    for (tx, ty) in grid.tiles() {
        let r = layer
            .chunk(band, tx, ty)
            .ok_or_else(|| StoreError::IncompleteManifest(layer.layer_name.clone()))?;
        let chunk = store.get_chunk(&r)?;
        let (c0, r0, w, h) = grid.tile_window(tx, ty);
        for row in 0..h {
            let dst = ((r0 + row) * layer.width + c0) as usize;
            let src = (row * TILE_SIZE) as usize;
            out[dst..dst + w as usize].copy_from_slice(&chunk.values[src..src + w as usize]);
        }
    }
    Ok(out)
}
