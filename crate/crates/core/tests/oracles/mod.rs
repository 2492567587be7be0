//! Randomized fixtures and brute-force scalar oracles for the raster
//! operations. Each `check_*` function builds one fixture from a seed, runs the
//! library operation and compares every cell or statistic against an
//! independent full-raster loop.
#![allow(dead_code)]

use ark_core::geo::{mercator_forward, mercator_inverse};
use ark_core::ingest::geotiff::Raster;
use ark_core::ingest::points::{PointRecord, PointSet, PointsKind};
use ark_core::ingest::polygons::{parse_geojson_polygons, PolygonSet, PolygonsKind, Zone};
use ark_core::ingest::tile_raster;
use ark_core::ops::{self, Geometry};
use ark_core::{Affine, Crs, DType, Label, LayerVersion, Store};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STAMP: &str = "2024-01-01T00:00:00Z";

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Chunks and stores a single-band raster without committing it.
pub fn layer(store: &Store, name: &str, geom: &Geometry, dtype: DType, nodata: Option<f64>, values: Vec<f64>) -> LayerVersion {
    layer_bands(store, name, geom, dtype, nodata, vec![values], Label::public())
}

pub fn layer_bands(
    store: &Store,
    name: &str,
    geom: &Geometry,
    dtype: DType,
    nodata: Option<f64>,
    bands: Vec<Vec<f64>>,
    label: Label,
) -> LayerVersion {
    let raster = Raster {
        width: geom.width,
        height: geom.height,
        dtype,
        nodata,
        crs: geom.crs,
        affine: geom.affine,
        bands,
    };
    tile_raster(store, &raster, name, &label, STAMP).expect("tile raster")
}

/// Lon/lat grid with power-of-two pixel sizes so every pixel edge and center
/// is exactly representable.
pub fn lattice_geometry(rng: &mut ChaCha8Rng) -> Geometry {
    let pw = [0.25, 0.5, 1.0][rng.gen_range(0..3)];
    let width = rng.gen_range(1..=64);
    let height = rng.gen_range(1..=64);
    let ox = rng.gen_range(-100..=60) as f64;
    let oy = rng.gen_range(-20..=70) as f64;
    Geometry { crs: Crs::Wgs84, affine: Affine::new(ox, oy, pw, -pw).unwrap(), width, height }
}

fn random_values(rng: &mut ChaCha8Rng, n: usize, integer: bool, nodata: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.1) {
                nodata
            } else if integer {
                rng.gen_range(-50..=50) as f64
            } else {
                rng.gen_range(-1000.0..1000.0)
            }
        })
        .collect()
}

// ---- zonal statistics -------------------------------------------------------

/// Exact point-in-zone test on coordinates scaled to integers: even-odd
/// parity of ray crossings, with points on any edge counted as inside.
pub fn oracle_inside(rings: &[Vec<(i64, i64)>], p: (i64, i64)) -> bool {
    let mut crossings = 0u32;
    for ring in rings {
        for e in ring.windows(2) {
            let (a, b) = (e[0], e[1]);
            let cross = (b.0 - a.0) as i128 * (p.1 - a.1) as i128 - (b.1 - a.1) as i128 * (p.0 - a.0) as i128;
            let within = p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1);
            if cross == 0 && within {
                return true;
            }
            if (a.1 > p.1) != (b.1 > p.1) {
                let num = (a.0 - p.0) as i128 * (b.1 - a.1) as i128 + (p.1 - a.1) as i128 * (b.0 - a.0) as i128;
                let den = (b.1 - a.1) as i128;
                if num != 0 && (num > 0) == (den > 0) {
                    crossings += 1;
                }
            }
        }
    }
    crossings % 2 == 1
}

const SCALE: f64 = 8.0;

fn scaled(x: f64) -> i64 {
    let s = x * SCALE;
    assert_eq!(s.fract(), 0.0, "coordinate {x} is off the test lattice");
    s as i64
}

fn zone_rings(zone: &Zone) -> Vec<Vec<(i64, i64)>> {
    zone.polygons
        .iter()
        .flat_map(|p| std::iter::once(&p.exterior).chain(p.holes.iter()))
        .map(|r| r.iter().map(|v| (scaled(v[0]), scaled(v[1]))).collect())
        .collect()
}

fn ring_json(pts: &[(f64, f64)]) -> String {
    let mut v: Vec<String> = pts.iter().map(|(x, y)| format!("[{x},{y}]")).collect();
    v.push(v[0].clone());
    format!("[{}]", v.join(","))
}

fn random_polygon(rng: &mut ChaCha8Rng, geom: &Geometry) -> String {
    let e = geom.affine.extent(geom.width, geom.height);
    let snap = |v: f64| (v * 2.0).round() / 2.0;
    let coord = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| snap(rng.gen_range(lo - 2.0..=hi + 2.0));
    let x0 = coord(e.min_x, e.max_x, rng);
    let x1 = coord(e.min_x, e.max_x, rng);
    let y0 = coord(e.min_y, e.max_y, rng);
    let y1 = coord(e.min_y, e.max_y, rng);
    let (xa, xb) = (x0.min(x1), x0.max(x1) + 0.5);
    let (ya, yb) = (y0.min(y1), y0.max(y1) + 0.5);
    match rng.gen_range(0..3) {
        0 => format!("[{}]", ring_json(&[(xa, ya), (xb, ya), (xb, yb), (xa, yb)])),
        1 => {
            let xm = snap((xa + xb) / 2.0);
            format!("[{}]", ring_json(&[(xa, ya), (xb, ya), (xm, yb)]))
        }
        _ => {
            let (hx0, hx1) = (snap(xa + (xb - xa) / 4.0), snap(xb - (xb - xa) / 4.0));
            let (hy0, hy1) = (snap(ya + (yb - ya) / 4.0), snap(yb - (yb - ya) / 4.0));
            if hx0 < hx1 && hy0 < hy1 {
                format!(
                    "[{},{}]",
                    ring_json(&[(xa, ya), (xb, ya), (xb, yb), (xa, yb)]),
                    ring_json(&[(hx0, hy0), (hx1, hy0), (hx1, hy1), (hx0, hy1)])
                )
            } else {
                format!("[{}]", ring_json(&[(xa, ya), (xb, ya), (xb, yb), (xa, yb)]))
            }
        }
    }
}

pub fn random_zones(rng: &mut ChaCha8Rng, geom: &Geometry) -> PolygonSet {
    let n = rng.gen_range(1..=4);
    let feats: Vec<String> = (0..n)
        .map(|i| {
            let geometry = if rng.gen_bool(0.25) {
                let a = random_polygon(rng, geom);
                let b = random_polygon(rng, geom);
                format!(r#"{{"type":"MultiPolygon","coordinates":[{a},{b}]}}"#)
            } else {
                format!(r#"{{"type":"Polygon","coordinates":{}}}"#, random_polygon(rng, geom))
            };
            format!(r#"{{"type":"Feature","id":"z{i}","properties":{{}},"geometry":{geometry}}}"#)
        })
        .collect();
    let text = format!(r#"{{"type":"FeatureCollection","features":[{}]}}"#, feats.join(","));
    PolygonSet {
        kind: PolygonsKind::Polygons,
        name: "zones".into(),
        time_stamp: STAMP.into(),
        label: Label::public(),
        zones: parse_geojson_polygons(&text).expect("fixture polygons"),
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Zonal statistics against a per-pixel membership loop.
pub fn check_zonal(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let geom = lattice_geometry(&mut rng);
    let integer = rng.gen_bool(0.5);
    let nodata = -9999.0;
    let n = (geom.width * geom.height) as usize;
    let values = random_values(&mut rng, n, integer, nodata);
    let dtype = if integer { DType::I32 } else { DType::F64 };
    let lv = layer(&store, "raster", &geom, dtype, Some(nodata), values.clone());
    let zones = random_zones(&mut rng, &geom);
    let got = ops::zonal_stats(&store, &lv, 1, &zones).map_err(|e| e.to_string())?;
    for (zone, stats) in zones.zones.iter().zip(&got.zones) {
        let rings = zone_rings(zone);
        let mut picked = Vec::new();
        for row in 0..geom.height {
            for col in 0..geom.width {
                let v = values[(row * geom.width + col) as usize];
                let (x, y) = geom.pixel_center(col, row);
                if v != nodata && oracle_inside(&rings, (scaled(x), scaled(y))) {
                    picked.push(v);
                }
            }
        }
        let ctx = || format!("seed {seed} zone {}", zone.id);
        if stats.count != picked.len() as u64 {
            return Err(format!("{}: count {} != {}", ctx(), stats.count, picked.len()));
        }
        if picked.is_empty() {
            if stats.sum.is_some() || stats.mean.is_some() || stats.min.is_some() || stats.max.is_some() {
                return Err(format!("{}: empty zone has statistics", ctx()));
            }
            continue;
        }
        let sum: f64 = picked.iter().sum();
        let mean = sum / picked.len() as f64;
        let min = picked.iter().copied().fold(f64::INFINITY, f64::min);
        let max = picked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_ok = if integer { stats.sum == Some(sum) } else { rel_close(stats.sum.unwrap(), sum, 1e-9) };
        if !sum_ok {
            return Err(format!("{}: sum {:?} != {sum}", ctx(), stats.sum));
        }
        if !rel_close(stats.mean.unwrap(), mean, 1e-9) {
            return Err(format!("{}: mean {:?} != {mean}", ctx(), stats.mean));
        }
        if stats.min != Some(min) || stats.max != Some(max) {
            return Err(format!("{}: min/max {:?}/{:?} != {min}/{max}", ctx(), stats.min, stats.max));
        }
    }
    Ok(())
}

// ---- point rasterization ----------------------------------------------------

pub fn random_points(rng: &mut ChaCha8Rng, geom: &Geometry, n: usize) -> PointSet {
    let e = geom.affine.extent(geom.width, geom.height);
    let pw = geom.affine.pixel_w;
    let records = (0..n)
        .map(|_| {
            let (lon, lat) = match rng.gen_range(0..3) {
                // on pixel corners and edges
                0 => (
                    e.min_x + pw * rng.gen_range(-2..=geom.width as i64 + 2) as f64,
                    e.max_y - pw * rng.gen_range(-2..=geom.height as i64 + 2) as f64,
                ),
                // clustered, so some cells collect several points
                1 => (
                    e.min_x + pw * (rng.gen_range(0..geom.width.min(4)) as f64 + 0.5),
                    e.max_y - pw * (rng.gen_range(0..geom.height.min(4)) as f64 + 0.5),
                ),
                _ => (
                    rng.gen_range(e.min_x - 1.0..e.max_x + 1.0),
                    rng.gen_range(e.min_y - 1.0..e.max_y + 1.0),
                ),
            };
            PointRecord { lon, lat, time: STAMP.into(), value: 1.0, category: "obs".into() }
        })
        .collect();
    PointSet { kind: PointsKind::Points, name: "points".into(), time_stamp: STAMP.into(), label: Label::public(), records }
}

/// Per-cell counts by testing every point against every cell's bounds.
pub fn oracle_counts(geom: &Geometry, points: &[PointRecord]) -> Vec<u64> {
    let a = &geom.affine;
    let mut out = vec![0u64; (geom.width * geom.height) as usize];
    for row in 0..geom.height {
        let top = a.origin_y + row as f64 * a.pixel_h;
        let bottom = a.origin_y + (row + 1) as f64 * a.pixel_h;
        for col in 0..geom.width {
            let left = a.origin_x + col as f64 * a.pixel_w;
            let right = a.origin_x + (col + 1) as f64 * a.pixel_w;
            out[(row * geom.width + col) as usize] = points
                .iter()
                .filter(|p| p.lon >= left && p.lon < right && p.lat <= top && p.lat > bottom)
                .count() as u64;
        }
    }
    out
}

/// Rasterization against brute-force binning; also checks suppression and
/// conservation.
pub fn check_rasterize(seed: u64, k: u32) -> Result<(), String> {
    let mut rng = rng(seed);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let geom = lattice_geometry(&mut rng);
    let n = rng.gen_range(0..300);
    let points = random_points(&mut rng, &geom, n);
    let lv = ops::rasterize_points(&store, &points, &geom, k, "counts").map_err(|e| e.to_string())?;
    let got = ops::read_band(&store, &lv, 1).map_err(|e| e.to_string())?;
    let want = oracle_counts(&geom, &points.records);
    for (i, (&g, &w)) in got.iter().zip(&want).enumerate() {
        let expect = if w > 0 && w < k as u64 { ops::COUNT_NODATA } else { w as f64 };
        if g != expect {
            return Err(format!("seed {seed} k {k} cell {i}: {g} != {expect} (raw {w})"));
        }
        if g > 0.0 && g < k as f64 {
            return Err(format!("seed {seed} k {k} cell {i}: revealed count {g}"));
        }
    }
    if k == 1 {
        let total: f64 = got.iter().sum();
        let in_bounds = want.iter().sum::<u64>();
        if total != in_bounds as f64 {
            return Err(format!("seed {seed}: total {total} != in-bounds points {in_bounds}"));
        }
    }
    Ok(())
}

// ---- temporal diff ----------------------------------------------------------

pub type Predicate = (&'static str, fn(f64, f64) -> bool);

pub const PREDICATES: [Predicate; 4] = [
    ("A.b1 != B.b1", |a, b| a != b),
    ("abs(A.b1 - B.b1) > 2", |a, b| (a - b).abs() > 2.0),
    ("B.b1 - A.b1 >= 1", |a, b| b - a >= 1.0),
    ("ifelse(A.b1 > 2, B.b1 < A.b1, 0)", |a, b| a > 2.0 && b < a),
];

pub fn check_diff(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let geom = lattice_geometry(&mut rng);
    let n = (geom.width * geom.height) as usize;
    let nodata = 255.0;
    let a: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.05) { nodata } else { rng.gen_range(0..6) as f64 }).collect();
    let b: Vec<f64> = a
        .iter()
        .map(|&v| if rng.gen_bool(0.2) { if rng.gen_bool(0.1) { nodata } else { rng.gen_range(0..6) as f64 } } else { v })
        .collect();
    let la = layer(&store, "lulc", &geom, DType::U8, Some(nodata), a.clone());
    let lb = layer(&store, "lulc", &geom, DType::U8, Some(nodata), b.clone());
    let (text, pred) = PREDICATES[rng.gen_range(0..PREDICATES.len())];
    let prog = ark_core::expr::parse(text, &["A", "B"]).unwrap();
    let aoi = if rng.gen_bool(0.5) {
        let e = geom.affine.extent(geom.width, geom.height);
        let snap = |v: f64| (v * 4.0).round() / 4.0;
        let x0 = snap(rng.gen_range(e.min_x..e.max_x));
        let y0 = snap(rng.gen_range(e.min_y..e.max_y));
        Some(ark_core::GeoExtent::new(x0, y0, x0 + rng.gen_range(1..40) as f64 * 0.25, y0 + rng.gen_range(1..40) as f64 * 0.25).unwrap())
    } else {
        None
    };
    let res = ops::temporal_diff(&store, &la, &lb, &prog, aoi.as_ref(), "mask").map_err(|e| e.to_string())?;
    let mask = ops::read_band(&store, &res.mask, 1).map_err(|e| e.to_string())?;
    let mut count = 0u64;
    for row in 0..geom.height {
        for col in 0..geom.width {
            let i = (row * geom.width + col) as usize;
            let (x, y) = geom.pixel_center(col, row);
            let in_aoi = aoi.is_none_or(|e| x >= e.min_x && x <= e.max_x && y >= e.min_y && y <= e.max_y);
            let want = if !in_aoi || a[i] == nodata || b[i] == nodata {
                ops::MASK_NODATA
            } else if pred(a[i], b[i]) {
                count += 1;
                1.0
            } else {
                0.0
            };
            if mask[i] != want {
                return Err(format!("seed {seed} {text:?} cell ({col},{row}): {} != {want}", mask[i]));
            }
        }
    }
    if res.changed_count != count {
        return Err(format!("seed {seed} {text:?}: changed_count {} != {count}", res.changed_count));
    }
    Ok(())
}

// ---- reprojection -----------------------------------------------------------

/// Nearest-neighbour reprojection against a per-pixel loop that projects
/// both coordinates of every destination pixel center.
pub fn check_reproject(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let forward = rng.gen_bool(0.5);
    let (sw, sh) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
    let (dw, dh) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
    let deg = rng.gen_range(0.05..1.0);
    let lon0 = rng.gen_range(-179.0..120.0);
    let lat0 = rng.gen_range(-20.0..84.0);
    let (src, dst) = if forward {
        let src = Geometry { crs: Crs::Wgs84, affine: Affine::new(lon0, lat0, deg, -deg).unwrap(), width: sw, height: sh };
        let (x0, y0) = mercator_forward(lon0 - 1.0, lat0.min(84.0) + 0.5).unwrap();
        let m = deg * 111_000.0 * rng.gen_range(0.5..2.0);
        (src, Geometry { crs: Crs::WebMercator, affine: Affine::new(x0, y0, m, -m).unwrap(), width: dw, height: dh })
    } else {
        let m = deg * 111_000.0;
        let (x0, y0) = mercator_forward(lon0, lat0).unwrap();
        let src = Geometry { crs: Crs::WebMercator, affine: Affine::new(x0, y0, m, -m).unwrap(), width: sw, height: sh };
        let d = deg * rng.gen_range(0.5..2.0);
        (src, Geometry { crs: Crs::Wgs84, affine: Affine::new(lon0 - 1.0, (lat0 + 3.0).min(89.0), d, -d).unwrap(), width: dw, height: dh })
    };
    let nodata = if rng.gen_bool(0.5) { Some(-1.0) } else { None };
    let values: Vec<f64> = (0..sw * sh).map(|_| rng.gen_range(0..1000) as f64).collect();
    let lv = layer(&store, "src", &src, DType::I16, nodata, values.clone());
    let out = ops::reproject_nearest(&store, &lv, &dst, "dst").map_err(|e| e.to_string())?;
    let got = ops::read_band(&store, &out, 1).map_err(|e| e.to_string())?;
    let fill = nodata.unwrap_or(DType::I16.default_nodata());
    if out.nodata != Some(fill) || (out.width, out.height) != (dw, dh) || out.crs != dst.crs {
        return Err(format!("seed {seed}: output geometry or nodata wrong"));
    }
    for row in 0..dh {
        for col in 0..dw {
            let (x, y) = dst.pixel_center(col, row);
            let srcxy = if forward { Some(mercator_inverse(x, y)) } else { mercator_forward(x, y).ok() };
            let want = srcxy
                .and_then(|(sx, sy)| {
                    let fc = ((sx - src.affine.origin_x) / src.affine.pixel_w).floor();
                    let fr = ((sy - src.affine.origin_y) / src.affine.pixel_h).floor();
                    (fc >= 0.0 && fr >= 0.0 && fc < sw as f64 && fr < sh as f64)
                        .then(|| values[(fr as u32 * sw + fc as u32) as usize])
                })
                .unwrap_or(fill);
            let g = got[(row * dw + col) as usize];
            if g != want {
                return Err(format!("seed {seed} pixel ({col},{row}): {g} != {want}"));
            }
        }
    }
    Ok(())
}
