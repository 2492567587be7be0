//! Committed datasets and small pipeline documents shared by integration tests.
#![allow(dead_code)]

use ark_core::canonical::Digest;
use ark_core::catalog::Dataset;
use ark_core::dataflow::PipelineDoc;
use ark_core::ingest::geotiff::Raster;
use ark_core::ingest::points::PointSet;
use ark_core::ingest::polygons::PolygonSet;
use ark_core::ingest::{commit_raster, commit_vector};
use ark_core::ops::Geometry;
use ark_core::{Affine, Crs, DType, Label, LayerVersion, Store};
use chrono::{DateTime, TimeZone, Utc};

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

pub fn store() -> (tempfile::TempDir, Store) {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    (dir, store)
}

/// Lon/lat grid of `w x h` pixels of 0.01 degrees anchored at (0, 20).
pub fn grid(w: u32, h: u32) -> Geometry {
    Geometry { crs: Crs::Wgs84, affine: Affine::new(0.0, 20.0, 0.01, -0.01).unwrap(), width: w, height: h }
}

/// Commits one raster version; the source digest is derived from the values.
pub fn commit(store: &Store, name: &str, geom: &Geometry, dtype: DType, nodata: Option<f64>, bands: Vec<Vec<f64>>, label: &Label) -> (Digest, LayerVersion) {
    let raster = Raster { width: geom.width, height: geom.height, dtype, nodata, crs: geom.crs, affine: geom.affine, bands };
    let source = Digest::of(format!("{name}:{:?}", raster.bands.iter().map(|b| b.iter().sum::<f64>()).collect::<Vec<_>>()).as_bytes());
    let imported = commit_raster(store, &raster, name, label, t0(), source, t0()).unwrap();
    let Dataset::Raster(l) = imported.dataset else { unreachable!() };
    (imported.manifest, l)
}

pub fn commit_points(store: &Store, set: PointSet) -> Digest {
    commit_vector(store, Dataset::Points(set), Digest::of(b"points"), t0()).unwrap().manifest
}

pub fn commit_polygons(store: &Store, set: PolygonSet) -> Digest {
    commit_vector(store, Dataset::Polygons(set), Digest::of(b"zones"), t0()).unwrap().manifest
}

/// Distinct u8 values in 0..200 so derived chains stay injective per pixel.
pub fn ramp(w: u32, h: u32, salt: u32) -> Vec<f64> {
    (0..w * h).map(|i| ((i.wrapping_mul(2654435761) ^ salt) % 200) as f64).collect()
}

pub fn doc(json: serde_json::Value) -> PipelineDoc {
    PipelineDoc::from_json(&json.to_string()).unwrap()
}

/// Three chained expression nodes over one input layer `base`.
pub fn chain_doc(layer: &str) -> PipelineDoc {
    doc(serde_json::json!({
        "name": "chain",
        "inputs": { "A": { "layer": layer } },
        "nodes": [
            { "id": "n1", "op": "expr", "inputs": ["A"], "params": { "expr": "A.b1 * 2 + 1" } },
            { "id": "n2", "op": "expr", "inputs": ["n1", "A"], "params": { "expr": "n1.b1 + A.b1" } },
            { "id": "n3", "op": "expr", "inputs": ["n2", "n1"], "params": { "expr": "max(n2.b1, n1.b1) - 1" } }
        ],
        "outputs": ["n3"]
    }))
}

pub fn u8_layer(store: &Store, name: &str, geom: &Geometry, values: Vec<f64>) -> (Digest, LayerVersion) {
    commit(store, name, geom, DType::U8, Some(255.0), vec![values], &Label::public())
}
