//! Reproduction bundles: a run's pipeline document, pinned inputs and the
//! exact source objects it read, bound together by an attestation digest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::{to_canonical_json, Digest};
use crate::catalog::{load_dataset, Dataset};
use crate::dataflow::{
    execute_plan, filter_provenance, plan_with_sources, provenance_of, DataflowError, ExecOptions, Pinned,
    PipelineDoc, ProvNode, RunRecord,
};
use crate::difc::{can_flow, Principal, TagSet};
use crate::store::{decode_object, list_objects_in, object_path_in, Store, StoreError};
use crate::ENGINE_VERSION;

pub const BUNDLE_FORMAT: &str = "ark-bundle/1";

#[derive(Debug, thiserror::Error)]
pub enum PublishError {
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {0} is incomplete")]
    IncompleteRun(String),
    #[error("{0} input object(s) are not readable by the exporter; use redaction")]
    Unreadable(usize),
    #[error("malformed bundle: {0}")]
    Malformed(String),
    #[error("bundle output directory {0} is not empty")]
    OutputExists(PathBuf),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Dataflow(#[from] DataflowError),
    #[error("bundle i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// `manifest.json` of a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub engine_version: String,
    pub op_versions: BTreeMap<String, String>,
    pub run_id: String,
    pub doc: PipelineDoc,
    pub doc_hash: Digest,
    pub pinned: BTreeMap<String, Pinned>,
    /// Published node id to expected output object.
    pub expected: BTreeMap<String, Digest>,
    /// Every node's output object, published or not.
    pub nodes: BTreeMap<String, Digest>,
    /// Capability-gated tag removals recorded by the run, by node.
    pub declassified: BTreeMap<String, crate::difc::Declassification>,
    pub objects: Vec<Digest>,
    /// Leaves withheld by redaction; their hashes stay in the record.
    #[serde(default)]
    pub redacted: Vec<Digest>,
    /// Clearance-filtered provenance of each node output (redacted bundles).
    #[serde(default)]
    pub provenance: BTreeMap<String, ProvNode>,
}

/// Who is exporting, for deciding which leaves are readable.
#[derive(Clone, Copy)]
pub struct Reader<'a> {
    pub principal: &'a Principal,
    pub tags: &'a TagSet,
    pub at: DateTime<Utc>,
}

#[derive(Clone, Copy, Default)]
pub struct ExportOptions<'a> {
    /// `None` exports with operator access to everything.
    pub reader: Option<Reader<'a>>,
    pub redact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub dir: PathBuf,
    pub attestation: Digest,
    pub objects: usize,
    pub redacted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mismatch {
    Attestation { expected: String, found: Digest },
    DocHash { expected: Digest, found: Digest },
    MissingObject { object: Digest },
    ObjectHash { object: Digest },
    UnexpectedObject { object: Digest },
    Output { node: String, expected: Digest, found: Option<Digest> },
    Provenance { node: String },
    Execution { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub reproduced: bool,
    /// Redacted bundles can only be checked, not replayed.
    pub redacted: bool,
    pub checked_objects: usize,
    pub mismatches: Vec<Mismatch>,
}

fn op_versions() -> BTreeMap<String, String> {
    use crate::dataflow::OpKind::*;
    [Expr, ZonalStats, RasterizePoints, TemporalDiff, ReprojectNearest]
        .into_iter()
        .map(|op| (op.name().to_string(), op.version().to_string()))
        .collect()
}

/// Source objects a run read: pinned manifests plus every task input that is
/// a chunk of a pinned raster.
fn source_closure(store: &Store, rec: &RunRecord) -> Result<BTreeMap<Digest, Dataset>, PublishError> {
    let mut owner: BTreeMap<Digest, &str> = BTreeMap::new();
    let mut datasets = BTreeMap::new();
    for (alias, pin) in &rec.pinned {
        let ds = load_dataset(store, &pin.manifest).map_err(|e| PublishError::Malformed(e.to_string()))?;
        if let Dataset::Raster(l) = &ds {
            for r in l.chunks.values() {
                owner.entry(r.0).or_insert(alias);
            }
        }
        datasets.insert(alias.as_str(), ds);
    }
    let mut out = BTreeMap::new();
    for (alias, pin) in &rec.pinned {
        out.insert(pin.manifest, datasets[alias.as_str()].clone());
    }
    for task in &rec.tasks {
        for input in &task.inputs {
            if let Some(alias) = owner.get(&input.object) {
                out.entry(input.object).or_insert_with(|| datasets[alias].clone());
            }
        }
    }
    Ok(out)
}

fn write_attested(dir: &Path, manifest: &BundleManifest) -> Result<Digest, PublishError> {
    let bytes = to_canonical_json(manifest).map_err(StoreError::from)?;
    let attestation = Digest::of(&bytes);
    fs::write(dir.join("manifest.json"), &bytes)?;
    fs::write(dir.join("ATTESTATION"), format!("{attestation}\n"))?;
    Ok(attestation)
}

/// Writes the bundle of `run_id` into the empty or missing directory `out`.
pub fn export_bundle(
    store: &Store,
    run_id: &str,
    out: &Path,
    opts: &ExportOptions<'_>,
) -> Result<ExportSummary, PublishError> {
    let Some((_, rec)) = RunRecord::load(store, run_id)? else {
        return Err(PublishError::UnknownRun(run_id.to_string()));
    };
    let mut produced: Vec<Digest> = rec.nodes.iter().map(|n| n.object).collect();
    produced.extend(rec.tasks.iter().flat_map(|t| t.outputs.iter().copied()));
    if rec.nodes.len() != rec.doc.nodes.len() || produced.iter().any(|d| !store.has_object(d)) {
        return Err(PublishError::IncompleteRun(run_id.to_string()));
    }
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(PublishError::OutputExists(out.to_path_buf()));
    }

    let public = Principal::new("public", Vec::<String>::new());
    let no_tags = TagSet::default();
    let reader = opts.reader.or(opts.redact.then_some(Reader { principal: &public, tags: &no_tags, at: Utc::now() }));
    let closure = source_closure(store, &rec)?;
    let readable = |ds: &Dataset| reader.is_none_or(|r| can_flow(ds.label(), r.principal, r.tags, r.at));
    let (mut objects, redacted): (Vec<Digest>, Vec<Digest>) = {
        let (ok, hidden): (Vec<_>, Vec<_>) = closure.iter().partition(|(_, ds)| readable(ds));
        (ok.into_iter().map(|(d, _)| *d).collect(), hidden.into_iter().map(|(d, _)| *d).collect())
    };
    if !redacted.is_empty() && !opts.redact {
        return Err(PublishError::Unreadable(redacted.len()));
    }

    let mut provenance = BTreeMap::new();
    if opts.redact {
        let r = reader.expect("redaction has a reader");
        for n in &rec.nodes {
            let tree = provenance_of(store, &n.object)?.ok_or_else(|| PublishError::IncompleteRun(run_id.into()))?;
            provenance.insert(n.node.clone(), filter_provenance(&tree, r.principal, r.tags, r.at));
            if can_flow(&n.label, r.principal, r.tags, r.at) {
                objects.push(n.object);
            }
        }
        objects.sort();
        objects.dedup();
    }

    fs::create_dir_all(out.join("objects"))?;
    let objects_dir = out.join("objects");
    objects.par_iter().try_for_each(|d| -> Result<(), PublishError> {
        let path = object_path_in(&objects_dir, d);
        fs::create_dir_all(path.parent().expect("fanout dir"))?;
        fs::write(path, store.raw_object_file(d)?)?;
        Ok(())
    })?;

    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.into(),
        engine_version: ENGINE_VERSION.into(),
        op_versions: op_versions(),
        run_id: rec.run_id.clone(),
        doc_hash: rec.doc_hash,
        doc: rec.doc.clone(),
        pinned: rec.pinned.clone(),
        expected: rec.outputs.clone(),
        nodes: rec.nodes.iter().map(|n| (n.node.clone(), n.object)).collect(),
        declassified: rec
            .nodes
            .iter()
            .filter_map(|n| n.declassification.clone().map(|d| (n.node.clone(), d)))
            .collect(),
        objects: objects.clone(),
        redacted: redacted.clone(),
        provenance,
    };
    let attestation = write_attested(out, &manifest)?;
    Ok(ExportSummary { dir: out.to_path_buf(), attestation, objects: objects.len(), redacted: redacted.len() })
}

fn check_objects(dir: &Path, manifest: &BundleManifest, mismatches: &mut Vec<Mismatch>) -> Result<usize, PublishError> {
    let objects_dir = dir.join("objects");
    let listed: BTreeSet<Digest> = manifest.objects.iter().copied().collect();
    let present: BTreeSet<Digest> = list_objects_in(&objects_dir)?.into_iter().collect();
    for d in present.difference(&listed) {
        mismatches.push(Mismatch::UnexpectedObject { object: *d });
    }
    let checked: Vec<Mismatch> = listed
        .par_iter()
        .filter_map(|d| match fs::read(object_path_in(&objects_dir, d)) {
            Err(_) => Some(Mismatch::MissingObject { object: *d }),
            Ok(raw) => decode_object(d, &raw).err().map(|_| Mismatch::ObjectHash { object: *d }),
        })
        .collect();
    mismatches.extend(checked);
    Ok(listed.len())
}

/// Replays the bundled pipeline in a scratch store and compares outputs.
fn replay(dir: &Path, manifest: &BundleManifest, workers: usize) -> Result<Vec<Mismatch>, PublishError> {
    let scratch = tempfile::tempdir()?;
    let store = Store::open(scratch.path())?;
    let objects_dir = dir.join("objects");
    manifest.objects.par_iter().try_for_each(|d| -> Result<(), PublishError> {
        let path = store.object_path(d);
        fs::create_dir_all(path.parent().expect("fanout dir"))?;
        fs::copy(object_path_in(&objects_dir, d), path)?;
        Ok(())
    })?;
    let mut sources = BTreeMap::new();
    for (alias, pin) in &manifest.pinned {
        let ds = load_dataset(&store, &pin.manifest)
            .map_err(|e| PublishError::Malformed(format!("pinned input {alias}: {e}")))?;
        if ds.name() != pin.layer {
            return Err(PublishError::Malformed(format!("pinned input {alias} is not {}", pin.layer)));
        }
        sources.insert(alias.clone(), ds);
    }
    // The run record attests these removals; replay re-applies them.
    let replayer = manifest.declassified.values().next().map(|d| {
        Principal::new(d.principal.clone(), Vec::<String>::new())
            .with_caps(manifest.declassified.values().flat_map(|d| d.tags.iter().cloned()))
    });
    let mut mismatches = Vec::new();
    let run = plan_with_sources(&manifest.doc, manifest.pinned.clone(), sources, replayer.as_ref())
        .and_then(|p| execute_plan(&store, &p, &ExecOptions { workers, principal: replayer.as_ref(), run_id: None }));
    match run {
        Err(e) => mismatches.push(Mismatch::Execution { message: e.to_string() }),
        Ok((_, rec)) => {
            for (node, expected) in manifest.nodes.iter().chain(&manifest.expected) {
                let found = rec.node(node).map(|n| n.object);
                if found != Some(*expected) {
                    mismatches.push(Mismatch::Output { node: node.clone(), expected: *expected, found });
                }
            }
        }
    }
    mismatches.dedup();
    Ok(mismatches)
}

/// Checks the attestation and every object hash, then replays the pipeline
/// from bundled inputs. Tampering is reported as mismatches; only unreadable
/// or unparsable bundles are errors.
pub fn verify_bundle(dir: &Path, workers: usize) -> Result<VerifyReport, PublishError> {
    let read = |name: &str| fs::read(dir.join(name)).map_err(|e| PublishError::Malformed(format!("{name}: {e}")));
    let bytes = read("manifest.json")?;
    let attestation = String::from_utf8(read("ATTESTATION")?).map_err(|_| PublishError::Malformed("ATTESTATION".into()))?;
    let found = Digest::of(&bytes);
    let mut report = VerifyReport { reproduced: false, redacted: false, checked_objects: 0, mismatches: Vec::new() };
    if attestation != format!("{found}\n") {
        report.mismatches.push(Mismatch::Attestation { expected: attestation.trim_end().to_string(), found });
    }
    let manifest: BundleManifest = match serde_json::from_slice(&bytes) {
        Ok(m) => m,
        Err(e) if report.mismatches.is_empty() => return Err(PublishError::Malformed(format!("manifest.json: {e}"))),
        Err(_) => return Ok(report),
    };
    if manifest.format != BUNDLE_FORMAT {
        return Err(PublishError::Malformed(format!("unsupported format {}", manifest.format)));
    }
    report.redacted = !manifest.redacted.is_empty();
    let doc_hash = manifest.doc.hash();
    if doc_hash != manifest.doc_hash {
        report.mismatches.push(Mismatch::DocHash { expected: manifest.doc_hash, found: doc_hash });
    }
    report.checked_objects = check_objects(dir, &manifest, &mut report.mismatches)?;
    if !report.mismatches.is_empty() {
        return Ok(report);
    }
    if report.redacted {
        for (node, tree) in &manifest.provenance {
            if !tree.verify() || manifest.nodes.get(node) != tree_object(tree).as_ref() && tree_object(tree).is_some() {
                report.mismatches.push(Mismatch::Provenance { node: node.clone() });
            }
        }
        return Ok(report);
    }
    report.mismatches = replay(dir, &manifest, workers)?;
    report.reproduced = report.mismatches.is_empty();
    Ok(report)
}

fn tree_object(tree: &ProvNode) -> Option<Digest> {
    match tree {
        ProvNode::Ingest { object, .. } | ProvNode::Task { object, .. } | ProvNode::Missing { object, .. } => Some(*object),
        ProvNode::Stub { .. } => None,
    }
}
