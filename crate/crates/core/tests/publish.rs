mod fixtures;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ark_core::canonical::to_canonical_json;
use ark_core::dataflow::{execute, provenance_of, ExecOptions, ProvNode};
use ark_core::difc::{Principal, TagSet};
use ark_core::publish::{export_bundle, verify_bundle, BundleManifest, ExportOptions, Mismatch, PublishError, Reader};
use ark_core::store::{list_objects_in, object_path_in};
use ark_core::{DType, Digest, Label, Store};
use fixtures::*;
use serde_json::json;

fn manifest(dir: &Path) -> BundleManifest {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn rewrite(dir: &Path, m: &BundleManifest) {
    let bytes = to_canonical_json(m).unwrap();
    fs::write(dir.join("manifest.json"), &bytes).unwrap();
    fs::write(dir.join("ATTESTATION"), format!("{}\n", Digest::of(&bytes))).unwrap();
}

fn chain_run(store: &Store) -> String {
    let g = grid(1100, 40);
    u8_layer(store, "base", &g, ramp(1100, 40, 9));
    execute(store, &chain_doc("base"), &ExecOptions::default()).unwrap().1.run_id
}

#[test]
fn one_node_bundle_holds_sources_doc_and_refs() {
    let (_d, store) = store();
    let (manifest_hash, layer) = u8_layer(&store, "base", &grid(1100, 10), ramp(1100, 10, 1));
    let d = doc(json!({
        "name": "one", "inputs": { "A": { "layer": "base" } },
        "nodes": [{ "id": "x", "op": "expr", "inputs": ["A"], "params": { "expr": "A.b1 + 1" } }],
        "outputs": ["x"]
    }));
    let (_, rec) = execute(&store, &d, &ExecOptions::default()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("bundle");
    let summary = export_bundle(&store, &rec.run_id, &dir, &ExportOptions::default()).unwrap();
    let m = manifest(&dir);
    let mut expected: BTreeSet<Digest> = layer.chunks.values().map(|r| r.0).collect();
    expected.insert(manifest_hash);
    assert_eq!(m.objects.iter().copied().collect::<BTreeSet<_>>(), expected);
    assert_eq!(list_objects_in(&dir.join("objects")).unwrap().len(), 3);
    assert_eq!(m.doc, d);
    assert_eq!(m.expected, rec.outputs);
    assert_eq!(summary.objects, 3);
    let att = fs::read_to_string(dir.join("ATTESTATION")).unwrap();
    assert_eq!(att.len(), 65);
    assert!(att.ends_with('\n'));

    let report = verify_bundle(&dir, 1).unwrap();
    assert!(report.reproduced, "{report:?}");
    assert_eq!(report.checked_objects, 3);
    assert!(matches!(export_bundle(&store, &rec.run_id, &dir, &ExportOptions::default()), Err(PublishError::OutputExists(_))));
    assert!(matches!(export_bundle(&store, "no-such-run", &out.path().join("x"), &ExportOptions::default()), Err(PublishError::UnknownRun(_))));
}

#[test]
fn bundle_objects_equal_provenance_closure() {
    let (_d, store) = store();
    let g = grid(2100, 1100);
    u8_layer(&store, "base", &g, ramp(2100, 1100, 2));
    u8_layer(&store, "other", &g, ramp(2100, 1100, 77));
    let d = doc(json!({
        "name": "closure",
        "inputs": { "A": { "layer": "base" }, "B": { "layer": "other" } },
        "nodes": [
            { "id": "s", "op": "expr", "inputs": ["A", "B"], "params": { "expr": "A.b1 * 3 + B.b1" } },
            { "id": "c", "op": "temporal_diff", "inputs": ["A", "B"],
              "params": { "predicate": "A.b1 > B.b1", "aoi": { "min_x": 0.0, "min_y": 19.0, "max_x": 5.0, "max_y": 20.0 } } }
        ],
        "outputs": ["s", "c"]
    }));
    let (_, rec) = execute(&store, &d, &ExecOptions::default()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("b");
    export_bundle(&store, &rec.run_id, &dir, &ExportOptions::default()).unwrap();

    // Independent closure: ingest leaves of every node's provenance tree plus
    // the pinned manifests.
    let mut closure: BTreeSet<Digest> = rec.pinned.values().map(|p| p.manifest).collect();
    for n in &rec.nodes {
        let tree = provenance_of(&store, &n.object).unwrap().unwrap();
        for leaf in tree.leaves() {
            let ProvNode::Ingest { object, .. } = leaf else { unreachable!() };
            closure.insert(*object);
        }
    }
    let bundled: BTreeSet<Digest> = list_objects_in(&dir.join("objects")).unwrap().into_iter().collect();
    assert_eq!(bundled, closure);
    // The diff reads only tiles touching its AOI (tile row 0, columns 0..=1).
    assert_eq!(bundled.len(), 2 + 6 + 6);
    assert!(verify_bundle(&dir, 2).unwrap().reproduced);
}

#[test]
fn every_single_byte_object_tamper_is_caught_before_replay() {
    let (_d, store) = store();
    let run = chain_run(&store);
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("b");
    export_bundle(&store, &run, &dir, &ExportOptions::default()).unwrap();
    let m = manifest(&dir);
    for d in &m.objects {
        let path = object_path_in(&dir.join("objects"), d);
        let original = fs::read(&path).unwrap();
        for pos in [0, original.len() / 2, original.len() - 1] {
            let mut bad = original.clone();
            bad[pos] ^= 0x01;
            fs::write(&path, &bad).unwrap();
            let report = verify_bundle(&dir, 1).unwrap();
            assert!(!report.reproduced);
            assert_eq!(report.mismatches, vec![Mismatch::ObjectHash { object: *d }]);
        }
        fs::write(&path, &original).unwrap();
    }
    assert!(verify_bundle(&dir, 1).unwrap().reproduced);
}

#[test]
fn manifest_doc_and_attestation_edits_are_detected() {
    let (_d, store) = store();
    let run = chain_run(&store);
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("b");
    export_bundle(&store, &run, &dir, &ExportOptions::default()).unwrap();
    let original = fs::read(dir.join("manifest.json")).unwrap();
    let att = fs::read_to_string(dir.join("ATTESTATION")).unwrap();

    // Any single-byte edit of manifest.json breaks the attestation.
    for pos in (0..original.len()).step_by(97) {
        let mut bad = original.clone();
        bad[pos] = if bad[pos] == b'0' { b'1' } else { b'0' };
        fs::write(dir.join("manifest.json"), &bad).unwrap();
        let report = verify_bundle(&dir, 1).unwrap();
        assert!(matches!(report.mismatches.first(), Some(Mismatch::Attestation { .. })), "byte {pos}");
        assert!(!report.reproduced);
    }
    fs::write(dir.join("manifest.json"), &original).unwrap();

    // Editing the doc and re-attesting still trips the doc hash.
    let mut m = manifest(&dir);
    m.doc.nodes[0].params = json!({ "expr": "A.b1 * 2 + 2" });
    rewrite(&dir, &m);
    let report = verify_bundle(&dir, 1).unwrap();
    assert!(matches!(report.mismatches.as_slice(), [Mismatch::DocHash { .. }]));

    // A doc edit with a matching doc hash changes the replayed outputs.
    m.doc_hash = m.doc.hash();
    rewrite(&dir, &m);
    let report = verify_bundle(&dir, 1).unwrap();
    assert!(!report.reproduced);
    assert!(report.mismatches.iter().all(|x| matches!(x, Mismatch::Output { .. })));

    fs::write(dir.join("manifest.json"), &original).unwrap();
    let flipped = if att.starts_with('a') { att.replacen('a', "b", 1) } else { format!("a{}", &att[1..]) };
    fs::write(dir.join("ATTESTATION"), flipped).unwrap();
    assert!(matches!(verify_bundle(&dir, 1).unwrap().mismatches.as_slice(), [Mismatch::Attestation { .. }]));
    fs::write(dir.join("ATTESTATION"), &att).unwrap();
    assert!(verify_bundle(&dir, 1).unwrap().reproduced);

    fs::remove_file(dir.join("ATTESTATION")).unwrap();
    assert!(matches!(verify_bundle(&dir, 1), Err(PublishError::Malformed(_))));
}

#[test]
fn removing_any_object_breaks_replay() {
    let (_d, store) = store();
    let run = chain_run(&store);
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("b");
    export_bundle(&store, &run, &dir, &ExportOptions::default()).unwrap();
    let full = manifest(&dir);
    let original = fs::read(dir.join("manifest.json")).unwrap();
    let attestation = fs::read(dir.join("ATTESTATION")).unwrap();
    for d in &full.objects {
        let path = object_path_in(&dir.join("objects"), d);
        let bytes = fs::read(&path).unwrap();
        fs::remove_file(&path).unwrap();
        assert!(matches!(verify_bundle(&dir, 1).unwrap().mismatches.as_slice(), [Mismatch::MissingObject { .. }]));
        // Even with the listing and attestation patched, replay cannot succeed.
        let mut m = full.clone();
        m.objects.retain(|o| o != d);
        rewrite(&dir, &m);
        let report = verify_bundle(&dir, 1);
        assert!(!report.map(|r| r.reproduced).unwrap_or(false));
        fs::write(&path, bytes).unwrap();
        fs::write(dir.join("manifest.json"), &original).unwrap();
        fs::write(dir.join("ATTESTATION"), &attestation).unwrap();
    }
    assert!(verify_bundle(&dir, 1).unwrap().reproduced);
}

#[test]
fn secret_inputs_need_redaction_which_keeps_their_hashes() {
    let (_d, store) = store();
    let g = grid(8, 8);
    let (open_m, open) = commit(&store, "open", &g, DType::U8, None, vec![ramp(8, 8, 1)], &Label::public());
    let (hidden_m, hidden) = commit(&store, "hidden", &g, DType::U8, None, vec![ramp(8, 8, 2)], &Label::from_tags(["survey"]));
    let d = doc(json!({
        "name": "mix",
        "inputs": { "P": { "layer": "open" }, "S": { "layer": "hidden" } },
        "nodes": [
            { "id": "p", "op": "expr", "inputs": ["P"], "params": { "expr": "P.b1 + 1" } },
            { "id": "s", "op": "expr", "inputs": ["P", "S"], "params": { "expr": "P.b1 + S.b1" } }
        ],
        "outputs": ["p", "s"]
    }));
    let (_, rec) = execute(&store, &d, &ExecOptions::default()).unwrap();
    let guest = Principal::new("guest", Vec::<String>::new());
    let tags = TagSet::default();
    let reader = Reader { principal: &guest, tags: &tags, at: t0() };
    let out = tempfile::tempdir().unwrap();
    let plain = ExportOptions { reader: Some(reader), redact: false };
    assert!(matches!(export_bundle(&store, &rec.run_id, &out.path().join("a"), &plain), Err(PublishError::Unreadable(2))));

    let dir = out.path().join("r");
    let redacted = ExportOptions { reader: Some(reader), redact: true };
    let summary = export_bundle(&store, &rec.run_id, &dir, &redacted).unwrap();
    assert_eq!(summary.redacted, 2);
    let m = manifest(&dir);
    let secret: BTreeSet<Digest> = [hidden_m, hidden.chunks.values().next().unwrap().0].into();
    assert_eq!(m.redacted.iter().copied().collect::<BTreeSet<_>>(), secret);
    assert!(m.objects.contains(&open_m));
    assert!(m.objects.contains(&open.chunks.values().next().unwrap().0));
    assert!(m.objects.contains(&rec.outputs["p"]));
    assert!(!m.objects.contains(&rec.outputs["s"]));
    assert!(m.objects.iter().all(|o| !secret.contains(o)));
    assert!(matches!(m.provenance["s"], ProvNode::Stub { .. }));
    assert!(!serde_json::to_string(&m.provenance).unwrap().contains("survey"));

    let report = verify_bundle(&dir, 1).unwrap();
    assert!(report.redacted);
    assert!(!report.reproduced);
    assert!(report.mismatches.is_empty(), "{report:?}");

    let cleared = Principal::new("ana", ["survey"]);
    let full = ExportOptions { reader: Some(Reader { principal: &cleared, tags: &tags, at: t0() }), redact: false };
    let dir = out.path().join("f");
    export_bundle(&store, &rec.run_id, &dir, &full).unwrap();
    assert!(verify_bundle(&dir, 1).unwrap().reproduced);
}

#[test]
fn declassified_runs_replay() {
    let (_d, store) = store();
    let g = grid(8, 8);
    commit(&store, "hidden", &g, DType::U8, None, vec![ramp(8, 8, 3)], &Label::from_tags(["survey"]));
    let d = doc(json!({
        "name": "release",
        "inputs": { "S": { "layer": "hidden" } },
        "nodes": [{ "id": "m", "op": "expr", "inputs": ["S"], "params": { "expr": "S.b1 > 100" }, "declassify": ["survey"] }],
        "outputs": ["m"]
    }));
    let officer = Principal::new("officer", ["survey"]).with_caps(["survey"]);
    let (_, rec) = execute(&store, &d, &ExecOptions { principal: Some(&officer), ..Default::default() }).unwrap();
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("b");
    export_bundle(&store, &rec.run_id, &dir, &ExportOptions::default()).unwrap();
    assert_eq!(manifest(&dir).declassified["m"].principal, "officer");
    assert!(verify_bundle(&dir, 1).unwrap().reproduced);
}
