//! Coordinate reference systems, north-up geotransforms and the fixed tile grid.


use serde::{Deserialize, Serialize};

/// Sphere radius used by spherical Web Mercator, in metres.
pub const EARTH_RADIUS: f64 = 6_378_137.0;

/// Latitude at which Web Mercator `y` reaches `pi * R`.
pub const MAX_MERCATOR_LAT: f64 = 85.051_128_78;

/// Edge length of every chunk, in pixels.
pub const TILE_SIZE: u32 = 1024;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeoError {
    #[error("latitude {0} outside the Web Mercator domain")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("unsupported EPSG code {0}")]
    UnsupportedCrs(u32),
    #[error("invalid extent: {0}")]
    InvalidExtent(String),
    #[error("pixel size must be non-zero and finite")]
    DegenerateAffine,
}

/// Supported coordinate reference systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Crs {
    /// EPSG:4326, longitude/latitude in degrees.
    Wgs84,
    /// EPSG:3857, spherical Web Mercator in metres.
    WebMercator,
}

impl Crs {
    pub fn from_epsg(code: u32) -> Result<Self, GeoError> {
        match code {
            4326 => Ok(Crs::Wgs84),
            3857 => Ok(Crs::WebMercator),
            other => Err(GeoError::UnsupportedCrs(other)),
        }
    }

    pub fn epsg(self) -> u32 {
        match self {
            Crs::Wgs84 => 4326,
            Crs::WebMercator => 3857,
        }
    }

    /// Converts a point from `self` into `dst`.
    pub fn transform_to(self, dst: Crs, x: f64, y: f64) -> Result<(f64, f64), GeoError> {
        match (self, dst) {
            (a, b) if a == b => Ok((x, y)),
            (Crs::Wgs84, Crs::WebMercator) => mercator_forward(x, y),
            (Crs::WebMercator, Crs::Wgs84) => Ok(mercator_inverse(x, y)),
            _ => unreachable!(),
        }
    }
}

impl Serialize for Crs {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u32(self.epsg())
    }
}

impl<'de> Deserialize<'de> for Crs {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let code = u32::deserialize(d)?;
        Crs::from_epsg(code).map_err(serde::de::Error::custom)
    }
}

/// Spherical Web Mercator forward projection (degrees to metres).
pub fn mercator_forward(lon: f64, lat: f64) -> Result<(f64, f64), GeoError> {
    if !(-180.0..=180.0).contains(&lon) {
        return Err(GeoError::LongitudeOutOfRange(lon));
    }
    if !(lat.abs() <= MAX_MERCATOR_LAT) {
        return Err(GeoError::LatitudeOutOfRange(lat));
    }
    let x = EARTH_RADIUS * lon.to_radians();
    let y = EARTH_RADIUS * lat.to_radians().tan().asinh();
    Ok((x, y))
}

/// Inverse of [`mercator_forward`] (metres to degrees).
pub fn mercator_inverse(x: f64, y: f64) -> (f64, f64) {
    let lon = (x / EARTH_RADIUS).to_degrees();
    let lat = (y / EARTH_RADIUS).sinh().atan().to_degrees();
    (lon, lat)
}

/// Axis-aligned extent in CRS units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoExtent {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl GeoExtent {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self, GeoError> {
        let all_finite = [min_x, min_y, max_x, max_y].iter().all(|v| v.is_finite());
        if !all_finite || min_x >= max_x || min_y >= max_y {
            return Err(GeoError::InvalidExtent(format!(
                "[{min_x}, {min_y}, {max_x}, {max_y}]"
            )));
        }
        Ok(GeoExtent { min_x, min_y, max_x, max_y })
    }

    /// Additionally checks the geographic bounds when the extent is in EPSG:4326.
    pub fn validated_for(self, crs: Crs) -> Result<Self, GeoError> {
        let me = GeoExtent::new(self.min_x, self.min_y, self.max_x, self.max_y)?;
        if crs == Crs::Wgs84
            && (me.min_x < -180.0 || me.max_x > 180.0 || me.min_y < -90.0 || me.max_y > 90.0)
        {
            return Err(GeoError::InvalidExtent("outside [-180,180]x[-90,90]".into()));
        }
        Ok(me)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    /// True when the two extents overlap with positive area.
    pub fn overlaps(&self, other: &GeoExtent) -> bool {
        self.min_x.max(other.min_x) < self.max_x.min(other.max_x)
            && self.min_y.max(other.min_y) < self.max_y.min(other.max_y)
    }

    /// Converts the extent into another CRS by projecting its corners.
    ///
    /// Both supported projections are separable and monotone per axis, so the
    /// corner images bound the projected region exactly.
    pub fn transform(&self, src: Crs, dst: Crs) -> Result<GeoExtent, GeoError> {
        let (x0, y0) = src.transform_to(dst, self.min_x, self.min_y)?;
        let (x1, y1) = src.transform_to(dst, self.max_x, self.max_y)?;
        GeoExtent::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
    }
}

/// North-up geotransform: shear terms are always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_w: f64,
    pub pixel_h: f64,
}

impl Affine {
    pub fn new(origin_x: f64, origin_y: f64, pixel_w: f64, pixel_h: f64) -> Result<Self, GeoError> {
        let ok = [origin_x, origin_y, pixel_w, pixel_h].iter().all(|v| v.is_finite())
            && pixel_w != 0.0
            && pixel_h != 0.0;
        if !ok {
            return Err(GeoError::DegenerateAffine);
        }
        Ok(Affine { origin_x, origin_y, pixel_w, pixel_h })
    }

    /// Maps fractional pixel coordinates to world coordinates. Pixel centers
    /// sit at `col + 0.5, row + 0.5`.
    pub fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        (self.origin_x + col * self.pixel_w, self.origin_y + row * self.pixel_h)
    }

    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin_x) / self.pixel_w, (y - self.origin_y) / self.pixel_h)
    }

    /// World extent covered by a `width x height` raster.
    pub fn extent(&self, width: u32, height: u32) -> GeoExtent {
        let (x0, y0) = self.pixel_to_world(0.0, 0.0);
        let (x1, y1) = self.pixel_to_world(width as f64, height as f64);
        GeoExtent {
            min_x: x0.min(x1),
            min_y: y0.min(y1),
            max_x: x0.max(x1),
            max_y: y0.max(y1),
        }
    }
}

/// Partition of a raster into `TILE_SIZE` square tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub width: u32,
    pub height: u32,
}

impl TileGrid {
    pub fn new(width: u32, height: u32) -> Self {
        TileGrid { width, height }
    }

    pub fn cols(&self) -> u32 {
        self.width.div_ceil(TILE_SIZE)
    }

    pub fn rows(&self) -> u32 {
        self.height.div_ceil(TILE_SIZE)
    }

    /// All tile indices sorted by `(tile_y, tile_x)`.
    pub fn tiles(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.rows()).flat_map(move |ty| (0..self.cols()).map(move |tx| (tx, ty)))
    }

    pub fn contains_tile(&self, tx: u32, ty: u32) -> bool {
        tx < self.cols() && ty < self.rows()
    }

    /// Tile holding an in-bounds pixel.
    pub fn tile_of(&self, col: u32, row: u32) -> Option<(u32, u32)> {
        (col < self.width && row < self.height).then_some((col / TILE_SIZE, row / TILE_SIZE))
    }

    /// In-bounds pixel window `(col0, row0, cols, rows)` of a tile; the rest of
    /// the chunk is padding.
    pub fn tile_window(&self, tx: u32, ty: u32) -> (u32, u32, u32, u32) {
        let c0 = tx * TILE_SIZE;
        let r0 = ty * TILE_SIZE;
        let w = TILE_SIZE.min(self.width.saturating_sub(c0));
        let h = TILE_SIZE.min(self.height.saturating_sub(r0));
        (c0, r0, w, h)
    }
}

/// Tiles whose in-bounds pixel footprint overlaps `extent` with positive area,
/// sorted by `(tile_y, tile_x)`. A disjoint extent yields an empty list.
pub fn tiles_covering(grid: &TileGrid, extent: &GeoExtent, affine: &Affine) -> Vec<(u32, u32)> {
    let (ca, ra) = affine.world_to_pixel(extent.min_x, extent.min_y);
    let (cb, rb) = affine.world_to_pixel(extent.max_x, extent.max_y);
    let (c_lo, c_hi) = (ca.min(cb), ca.max(cb));
    let (r_lo, r_hi) = (ra.min(rb), ra.max(rb));
    let spans = |lo: f64, hi: f64, count: u32, limit: u32| -> Vec<u32> {
        (0..count)
            .filter(|&t| {
                let start = (t * TILE_SIZE) as f64;
                let end = ((t + 1) * TILE_SIZE).min(limit) as f64;
                start.max(lo) < end.min(hi)
            })
            .collect()
    };
    let xs = spans(c_lo, c_hi, grid.cols(), grid.width);
    let ys = spans(r_lo, r_hi, grid.rows(), grid.height);
    ys.iter()
        .flat_map(|&ty| xs.iter().map(move |&tx| (tx, ty)))
        .collect()
}
