//! Polygon zones from GeoJSON FeatureCollections.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::difc::Label;
use crate::geo::GeoExtent;

pub type Ring = Vec<[f64; 2]>;

/// One polygon: exterior ring counter-clockwise, holes clockwise. Rings are
/// closed (first vertex repeated last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

/// A zone is one feature; a MultiPolygon feature contributes several polygons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub polygons: Vec<Polygon>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonSet {
    pub kind: PolygonsKind,
    pub name: String,
    pub time_stamp: String,
    pub label: Label,
    pub zones: Vec<Zone>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolygonsKind {
    #[default]
    Polygons,
}

#[derive(Debug, thiserror::Error)]
pub enum GeoJsonError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expected a FeatureCollection")]
    NotFeatureCollection,
    #[error("feature {0}: geometry {1} is not a Polygon or MultiPolygon")]
    NonPolygon(usize, String),
    #[error("feature {0}: ring is not closed")]
    UnclosedRing(usize),
    #[error("feature {0}: {1}")]
    Invalid(usize, String),
}

/// Twice the signed area; positive for counter-clockwise rings.
pub fn signed_area2(ring: &[[f64; 2]]) -> f64 {
    ring.windows(2)
        .map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1])
        .sum()
}

/// Shoelace area in squared CRS units (degrees squared for EPSG:4326).
pub fn polygon_area(p: &Polygon) -> f64 {
    let ext = signed_area2(&p.exterior).abs() / 2.0;
    let holes: f64 = p.holes.iter().map(|h| signed_area2(h).abs() / 2.0).sum();
    ext - holes
}

fn orient(mut ring: Ring, ccw: bool) -> Ring {
    if (signed_area2(&ring) > 0.0) != ccw {
        ring.reverse();
    }
    ring
}

fn parse_ring(v: &Value, feature: usize) -> Result<Ring, GeoJsonError> {
    let pts = v
        .as_array()
        .ok_or_else(|| GeoJsonError::Invalid(feature, "ring is not an array".into()))?;
    let mut ring = Vec::with_capacity(pts.len());
    for p in pts {
        let xy = p
            .as_array()
            .filter(|a| a.len() >= 2)
            .and_then(|a| Some([a[0].as_f64()?, a[1].as_f64()?]))
            .ok_or_else(|| GeoJsonError::Invalid(feature, "bad position".into()))?;
        if !(-180.0..=180.0).contains(&xy[0]) || !(-90.0..=90.0).contains(&xy[1]) {
            return Err(GeoJsonError::Invalid(feature, format!("position {xy:?} out of range")));
        }
        ring.push(xy);
    }
    if ring.len() < 4 || ring.first() != ring.last() {
        return Err(GeoJsonError::UnclosedRing(feature));
    }
    Ok(ring)
}

fn parse_polygon(v: &Value, feature: usize) -> Result<Polygon, GeoJsonError> {
    let rings = v
        .as_array()
        .filter(|r| !r.is_empty())
        .ok_or_else(|| GeoJsonError::Invalid(feature, "polygon without rings".into()))?;
    let exterior = orient(parse_ring(&rings[0], feature)?, true);
    let holes = rings[1..]
        .iter()
        .map(|r| parse_ring(r, feature).map(|r| orient(r, false)))
        .collect::<Result<_, _>>()?;
    Ok(Polygon { exterior, holes })
}

/// Parses a FeatureCollection of Polygon/MultiPolygon features into zones,
/// normalizing ring orientation.
pub fn parse_geojson_polygons(text: &str) -> Result<Vec<Zone>, GeoJsonError> {
    let doc: Value = serde_json::from_str(text)?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(GeoJsonError::NotFeatureCollection);
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or(GeoJsonError::NotFeatureCollection)?;
    let mut zones = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        let geom = f
            .get("geometry")
            .ok_or_else(|| GeoJsonError::Invalid(i, "missing geometry".into()))?;
        let ty = geom.get("type").and_then(Value::as_str).unwrap_or("null");
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| GeoJsonError::Invalid(i, "missing coordinates".into()));
        let polygons = match ty {
            "Polygon" => vec![parse_polygon(coords?, i)?],
            "MultiPolygon" => coords?
                .as_array()
                .ok_or_else(|| GeoJsonError::Invalid(i, "bad MultiPolygon".into()))?
                .iter()
                .map(|p| parse_polygon(p, i))
                .collect::<Result<_, _>>()?,
            other => return Err(GeoJsonError::NonPolygon(i, other.to_string())),
        };
        let id = match f.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => i.to_string(),
        };
        zones.push(Zone { id, polygons });
    }
    Ok(zones)
}

fn on_segment(x: f64, y: f64, a: [f64; 2], b: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
    cross == 0.0
        && x >= a[0].min(b[0])
        && x <= a[0].max(b[0])
        && y >= a[1].min(b[1])
        && y <= a[1].max(b[1])
}

/// Even-odd membership across all rings of a zone; points exactly on any
/// edge count as inside.
pub fn zone_contains(zone: &Zone, x: f64, y: f64) -> bool {
    let rings = zone
        .polygons
        .iter()
        .flat_map(|p| std::iter::once(&p.exterior).chain(p.holes.iter()));
    let mut inside = false;
    for ring in rings {
        for w in ring.windows(2) {
            let (a, b) = (w[0], w[1]);
            if on_segment(x, y, a, b) {
                return true;
            }
            if (a[1] > y) != (b[1] > y) {
                let xi = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if x < xi {
                    inside = !inside;
                }
            }
        }
    }
    inside
}

pub fn zone_bbox(zone: &Zone) -> Option<GeoExtent> {
    let mut it = zone.polygons.iter().flat_map(|p| p.exterior.iter());
    let first = it.next()?;
    let mut e = GeoExtent { min_x: first[0], min_y: first[1], max_x: first[0], max_y: first[1] };
    for p in it {
        e.min_x = e.min_x.min(p[0]);
        e.min_y = e.min_y.min(p[1]);
        e.max_x = e.max_x.max(p[0]);
        e.max_y = e.max_y.max(p[1]);
    }
    Some(e)
}
