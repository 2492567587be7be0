//! End-to-end acceptance checks. Prints one PASS or FAIL line per criterion
//! and exits non-zero if any fails.

#[path = "../../service/tests/common/mod.rs"]
mod common;
#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ark_core::canonical::to_canonical_json;
use ark_core::dataflow::{execute, ExecOptions, RunRecord, TaskStatus};
use ark_core::geo::{mercator_forward, mercator_inverse, MAX_MERCATOR_LAT};
use ark_core::ingest::geotiff::{encode, Layout, Raster, WriteOptions};
use ark_core::ingest::{import, IngestSpec, SourceKind};
use ark_core::publish::{export_bundle, verify_bundle, BundleManifest, ExportOptions};
use ark_core::store::quantize::{bits_for_range, lossy_quantize};
use ark_core::store::{diff_versions, object_path_in, TileKey};
use ark_core::{Affine, Chunk, Crs, DType, Digest, Label, Store};
use ark_service::DeliveryStatus;
use axum::http::{Method, StatusCode};
use common::fixtures::{self, chain_doc, grid, ramp, u8_layer};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn store() -> (tempfile::TempDir, Store) {
    fixtures::store()
}

fn run(store: &Store, workers: usize) -> RunRecord {
    execute(store, &chain_doc("base"), &ExecOptions { workers, ..Default::default() }).unwrap().1
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let raster = Raster {
        width: 2500,
        height: 2500,
        dtype: DType::U8,
        nodata: Some(255.0),
        crs: Crs::Wgs84,
        affine: Affine::new(0.0, 20.0, 0.01, -0.01).unwrap(),
        bands: vec![ramp(2500, 2500, 21)],
    };
    let tif = dir.path().join("lulc.tif");
    fs::write(&tif, encode(&raster, WriteOptions { layout: Layout::Tiles { size: 256 }, deflate: true }).unwrap()).unwrap();
    let spec = IngestSpec {
        layer_name: "base".into(),
        source_path: tif,
        source_kind: SourceKind::Geotiff,
        label: Label::public(),
        time_stamp: fixtures::t0(),
    };

    let started = Instant::now();
    let (_a, a) = store();
    let (_b, b) = store();
    let m1 = import(&a, &spec, fixtures::t0()).unwrap().manifest;
    let m2 = import(&a, &spec, fixtures::t0()).unwrap().manifest;
    let m3 = import(&b, &spec, fixtures::t0()).unwrap().manifest;
    ensure!(m1 == m2 && m2 == m3, "manifests differ: {m1} {m2} {m3}");
    let r1 = run(&a, 1);
    let r2 = run(&a, 1);
    let r3 = run(&b, 1);
    ensure!(r1.outputs == r2.outputs && r2.outputs == r3.outputs, "output refs differ");
    ensure!(r2.executed == 0, "second run executed {} tasks", r2.executed);
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2}s");
    Ok(format!("2500x2500 manifest {}, outputs identical, {secs:.2}s", &m1.to_hex()[..12]))
}

fn chunk_objects(store: &Store) -> usize {
    let objects = store.list_objects().unwrap();
    objects.iter().filter(|d| store.get_object(d).unwrap().starts_with(b"ADF1")).count()
}

fn dedup() -> Outcome {
    let (_d, store) = store();
    let g = grid(3072, 3072);
    let a = ramp(3072, 3072, 1);
    let mut b = a.clone();
    let changed = [(0, 0), (2, 0), (1, 1), (2, 2)];
    for (tx, ty) in changed {
        let i = (ty * 1024 + 5) * 3072 + tx * 1024 + 7;
        b[i] = (b[i] + 1.0) % 200.0;
    }
    u8_layer(&store, "before", &g, a);
    u8_layer(&store, "after", &g, b);
    let n = chunk_objects(&store);
    ensure!(n == 13, "{n} chunk objects");
    Ok(format!("{n} chunk objects"))
}

fn incremental() -> Outcome {
    let (w, h) = (2100u32, 2100u32);
    let g = grid(w, h);
    let mut values = ramp(w, h, 5);
    let (_d, store) = store();
    let (_, mut prev) = u8_layer(&store, "base", &g, values.clone());
    let first = run(&store, 1);
    ensure!(first.executed == 27, "cold run executed {}", first.executed);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut executed_total = 0;
    for edit in 0..100 {
        let (tx, ty) = (rng.gen_range(0..3u32), rng.gen_range(0..3u32));
        let span = |t: u32, n: u32| (t * 1024)..((t + 1) * 1024).min(n);
        let col = rng.gen_range(span(tx, w));
        let row = rng.gen_range(span(ty, h));
        let i = (row * w + col) as usize;
        values[i] = (values[i] + 1.0 + rng.gen_range(0..198) as f64) % 200.0;
        let (_, next) = u8_layer(&store, "base", &g, values.clone());
        let changed: BTreeSet<TileKey> = diff_versions(&prev, &next).unwrap().into_iter().collect();
        let rec = run(&store, 1);
        let expected = 3 * changed.len();
        ensure!(rec.executed == expected, "edit {edit}: executed {} expected {expected}", rec.executed);
        let ran: BTreeSet<TileKey> = rec.tasks.iter().filter(|t| t.status == TaskStatus::Executed).filter_map(|t| t.tile).collect();
        ensure!(ran == changed, "edit {edit}: executed tiles {ran:?} changed {changed:?}");
        executed_total += rec.executed;

        let (_c, cold) = fixtures::store();
        u8_layer(&cold, "base", &g, values.clone());
        let full = run(&cold, 1);
        ensure!(full.executed == 27, "edit {edit}: cold run executed {}", full.executed);
        ensure!(full.outputs == rec.outputs, "edit {edit}: incremental outputs differ from cold recompute");
        prev = next;
    }
    Ok(format!("100 edits, {executed_total} tasks executed, all outputs equal cold recompute"))
}

fn non_interference(rt: &tokio::runtime::Runtime) -> Outcome {
    rt.block_on(async {
        let env = common::env();
        let report = fuzz::non_interference(&env, 10_000, 4242).await;
        ensure!(report.leaks.is_empty(), "{} leaks, first: {}", report.leaks.len(), report.leaks[0]);

        let env = common::env();
        let uri = format!("/tiles/census/{}/1/0/0", env.census.0);
        let end = embargo_end();
        let mut seen = Vec::new();
        for at in [end - chrono::Duration::nanoseconds(1), end] {
            env.clock.set(at);
            seen.push(env.call(Method::GET, &uri, Some(PUBLIC), None).await.0);
        }
        ensure!(seen == [StatusCode::FORBIDDEN, StatusCode::OK], "embargo statuses {seen:?}");
        Ok(format!("{} probes, 0 leaks, statuses {:?}; embargo flips at {end}", report.probes, report.statuses))
    })
}

fn oracle_equivalence() -> Outcome {
    for seed in 0..100 {
        oracles::check_zonal(seed)?;
        oracles::check_rasterize(seed, 1)?;
        oracles::check_diff(seed)?;
        oracles::check_reproject(seed)?;
    }
    Ok("zonal, rasterize, diff, reproject each match on 100 fixtures".into())
}

fn suppression() -> Outcome {
    for k in [1, 2, 3, 5] {
        for seed in 0..100 {
            oracles::check_rasterize(1000 + seed, k)?;
        }
    }
    Ok("k in {2,3,5} reveal no count below k; k=1 conserves totals".into())
}

fn projection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0f64;
    for _ in 0..10_000 {
        let lon = rng.gen_range(-180.0..=180.0);
        let lat = rng.gen_range(-MAX_MERCATOR_LAT..=MAX_MERCATOR_LAT);
        let (x, y) = mercator_forward(lon, lat).map_err(|e| e.to_string())?;
        let (lon2, lat2) = mercator_inverse(x, y);
        worst = worst.max((lon - lon2).abs()).max((lat - lat2).abs());
    }
    ensure!(worst <= 1e-9, "worst round-trip error {worst:e} degrees");
    let (x, y) = mercator_forward(180.0, 0.0).map_err(|e| e.to_string())?;
    let want = std::f64::consts::PI * 6_378_137.0;
    ensure!((x - want).abs() <= 1e-6 && y.abs() <= 1e-6, "(180, 0) -> ({x}, {y})");
    Ok(format!("worst round-trip error {worst:.1e} degrees; (180,0) -> {x:.6} m"))
}

fn lossy_bound() -> Outcome {
    let (_d, store) = store();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cells = 0usize;
    for i in 0..100 {
        let (w, h) = (rng.gen_range(1..=256u32), rng.gen_range(1..=256u32));
        let dtype = if rng.gen_bool(0.5) { DType::F32 } else { DType::F64 };
        let nodata = -9999.0;
        let lo: f64 = rng.gen_range(-1e4..1e4);
        let span: f64 = rng.gen_range(0.0..1e3);
        let bound: f64 = rng.gen_range(1e-4..1.0);
        let values: Vec<f64> = (0..w * h)
            .map(|_| if rng.gen_bool(0.05) { nodata } else { (rng.gen_range(lo..=lo + span) as f32) as f64 })
            .collect();
        let original = Chunk::new(dtype, w, h, Some(nodata), values).unwrap();
        let q = lossy_quantize(&original, bound).map_err(|e| e.to_string())?;
        let stored = store.get_chunk(&store.put_chunk(&q.chunk).unwrap()).unwrap();
        for (j, (&a, &b)) in original.values.iter().zip(&stored.values).enumerate() {
            if a == nodata {
                ensure!(b == nodata, "chunk {i} cell {j}: NODATA became {b}");
            } else {
                ensure!((a - b).abs() <= bound, "chunk {i} cell {j}: |{a} - {b}| > {bound}");
            }
            cells += 1;
        }
    }
    let bits = bits_for_range(0.0, 10.0, 0.05);
    let span: Vec<f64> = (0..=1000).map(|i| i as f64 / 100.0).collect();
    let q = lossy_quantize(&Chunk::new(DType::F64, 1001, 1, None, span).unwrap(), 0.05).map_err(|e| e.to_string())?;
    ensure!(bits == 7 && q.codebook.bits == 7, "[0,10] at 0.05 uses {bits} / {} bits", q.codebook.bits);
    Ok(format!("{cells} cells within bound; [0,10] at 0.05 uses 7 bits"))
}

fn publishing() -> Outcome {
    let (_d, store) = store();
    u8_layer(&store, "base", &grid(1100, 1100), ramp(1100, 1100, 9));
    let run_id = run(&store, 1).run_id;
    let fresh = tempfile::tempdir().unwrap();
    let dir = fresh.path().join("bundle");
    let started = Instant::now();
    export_bundle(&store, &run_id, &dir, &ExportOptions::default()).map_err(|e| e.to_string())?;
    drop(store);
    let report = verify_bundle(&dir, 1).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    ensure!(report.reproduced && report.mismatches.is_empty(), "clean bundle: {report:?}");
    ensure!(secs < 10.0, "export and verify took {secs:.2}s");

    let detected = |dir: &std::path::Path| verify_bundle(dir, 1).map(|r| !r.reproduced && !r.mismatches.is_empty()).unwrap_or(true);
    let mut tampers = 0;
    let manifest_path = dir.join("manifest.json");
    let original = fs::read(&manifest_path).unwrap();
    let m: BundleManifest = serde_json::from_slice(&original).unwrap();
    for d in &m.objects {
        let path = object_path_in(&dir.join("objects"), d);
        let bytes = fs::read(&path).unwrap();
        for pos in [0, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x01;
            fs::write(&path, &bad).unwrap();
            ensure!(detected(&dir), "object {d} byte {pos} tamper undetected");
            tampers += 1;
        }
        fs::write(&path, &bytes).unwrap();
    }
    for pos in (0..original.len()).step_by(41) {
        let mut bad = original.clone();
        bad[pos] = if bad[pos] == b'0' { b'1' } else { b'0' };
        fs::write(&manifest_path, &bad).unwrap();
        ensure!(detected(&dir), "manifest byte {pos} tamper undetected");
        tampers += 1;
    }
    // A doc edit that is re-attested must still be caught.
    let mut edited = m.clone();
    edited.doc.nodes[0].params = json!({ "expr": "A.b1 * 2 + 2" });
    let bytes = to_canonical_json(&edited).unwrap();
    fs::write(&manifest_path, &bytes).unwrap();
    fs::write(dir.join("ATTESTATION"), format!("{}\n", Digest::of(&bytes))).unwrap();
    ensure!(detected(&dir), "re-attested doc edit undetected");
    tampers += 1;

    fs::write(&manifest_path, &original).unwrap();
    fs::write(dir.join("ATTESTATION"), format!("{}\n", Digest::of(&original))).unwrap();
    ensure!(verify_bundle(&dir, 1).map_err(|e| e.to_string())?.reproduced, "restored bundle no longer verifies");
    Ok(format!("reproduced=true in {secs:.2}s; {tampers} single-byte or doc tampers all detected"))
}

fn scenario(rt: &tokio::runtime::Runtime) -> Outcome {
    rt.block_on(async {
        let env = env();
        let g = grid(256, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let before: Vec<f64> = (0..256 * 256).map(|_| rng.gen_range(0..8) as f64).collect();
        // A 6x6 block plus one cell, all inside the AOI below.
        let mut patch: Vec<(u32, u32)> = (0..36).map(|i| (110 + i % 6, 70 + i / 6)).collect();
        patch.push((116, 70));
        let mut after = before.clone();
        for &(c, r) in &patch {
            let i = (r * 256 + c) as usize;
            after[i] = (after[i] + 1.0 + rng.gen_range(0..7) as f64) % 8.0;
        }
        // Brute-force count of cells that differ with centers inside the AOI.
        let (min_x, min_y, max_x, max_y) = (1.0, 19.0, 1.4, 19.4);
        let oracle = (0..256 * 256usize)
            .filter(|&i| before[i] != after[i])
            .filter(|&i| {
                let (x, y) = (0.005 + (i % 256) as f64 * 0.01, 20.0 - 0.005 - (i / 256) as f64 * 0.01);
                (min_x..=max_x).contains(&x) && (min_y..=max_y).contains(&y)
            })
            .count() as u64;
        ensure!(oracle == 37, "fixture oracle counts {oracle}");

        u8_layer(env.svc.store(), "lulc", &g, before);
        let hook = hook(0).await;
        let body = json!({
            "layer": "lulc",
            "aoi": { "min_x": min_x, "min_y": min_y, "max_x": max_x, "max_y": max_y },
            "predicate": "A.b1 != B.b1",
            "webhook_url": hook.url,
        });
        let (s, b) = env.call(Method::POST, "/subscriptions", Some(PUBLIC), Some(&body)).await;
        ensure!(s == StatusCode::CREATED, "subscribe: {s} {}", String::from_utf8_lossy(&b));
        u8_layer(env.svc.store(), "lulc", &g, after);
        let out = env.svc.poll_commits().await.map_err(|e| e.to_string())?;
        env.svc.poll_commits().await.map_err(|e| e.to_string())?;
        let got = hook.received.lock().unwrap().clone();
        ensure!(got.len() == 1, "{} webhook deliveries", got.len());
        ensure!(out.len() == 1 && out[0].status == DeliveryStatus::Delivered, "delivery log {out:?}");
        let count = got[0]["changed_count"].as_u64();
        ensure!(count == Some(oracle), "changed_count {count:?}, oracle {oracle}");
        Ok(format!("1 delivery with changed_count={oracle}"))
    })
}

fn scheduling() -> Outcome {
    let g = grid(2100, 1100);
    let values = ramp(2100, 1100, 4);
    let mut seen = Vec::new();
    for workers in [1, 2, 4, 8] {
        let (_d, store) = store();
        u8_layer(&store, "base", &g, values.clone());
        let rec = run(&store, workers);
        let nodes: Vec<(String, Digest)> = rec.nodes.iter().map(|n| (n.node.clone(), n.object)).collect();
        let mut tasks: Vec<(String, Option<TileKey>, Vec<Digest>)> =
            rec.tasks.iter().map(|t| (t.node.clone(), t.tile, t.outputs.clone())).collect();
        tasks.sort();
        seen.push((workers, rec.outputs, nodes, tasks));
    }
    let (_, o, n, t) = &seen[0];
    for (workers, o2, n2, t2) in &seen[1..] {
        ensure!(o == o2 && n == n2 && t == t2, "{workers} workers differ from 1");
    }
    Ok("1, 2, 4 and 8 workers give identical output refs and record outputs".into())
}

fn main() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("determinism", Box::new(determinism)),
        ("dedup", Box::new(dedup)),
        ("incremental equals full", Box::new(incremental)),
        ("non-interference", Box::new(|| non_interference(&rt))),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("suppression", Box::new(suppression)),
        ("projection accuracy", Box::new(projection)),
        ("lossy bound", Box::new(lossy_bound)),
        ("reproducible publishing", Box::new(publishing)),
        ("subscription scenario", Box::new(|| scenario(&rt))),
        ("scheduling independence", Box::new(scheduling)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
