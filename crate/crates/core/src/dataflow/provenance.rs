use std::collections::{BTreeSet, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::canonical::{canonical_digest, Digest};
use crate::difc::{can_flow, Declassification, Label, Principal, TagSet};
use crate::ingest::IngestRecord;
use crate::store::{Store, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvInput {
    pub role: String,
    pub object: Digest,
}

/// Derivation record of an object produced by a pipeline task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProv {
    pub kind: String,
    pub op: String,
    pub op_version: String,
    pub node: String,
    /// `tile`, `combine` or `assemble`.
    pub stage: String,
    pub params_hash: Digest,
    pub label: Label,
    #[serde(default)]
    pub declassification: Option<Declassification>,
    pub inputs: Vec<ProvInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvEdge {
    pub role: String,
    pub node: ProvNode,
}

/// Merkle provenance tree. Every node carries the hash of its full subtree,
/// so a view with stubbed nodes still verifies against the original root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProvNode {
    Ingest {
        hash: Digest,
        object: Digest,
        dataset: String,
        source_digest: Digest,
        label_hash: Digest,
        label: Label,
    },
    Task {
        hash: Digest,
        object: Digest,
        op: String,
        op_version: String,
        node: String,
        stage: String,
        params_hash: Digest,
        label_hash: Digest,
        label: Label,
        declass_hash: Digest,
        declassification: Option<Declassification>,
        children: Vec<ProvEdge>,
    },
    /// A node the viewer may not read: only its hash and its children remain.
    Stub { hash: Digest, children: Vec<ProvEdge> },
    /// An object with no provenance record.
    Missing { hash: Digest, object: Digest },
}

fn digest(v: serde_json::Value) -> Digest {
    canonical_digest(&v).expect("serializes")
}

fn missing_hash(object: &Digest) -> Digest {
    digest(json!({ "kind": "missing", "object": object }))
}

impl ProvNode {
    pub fn hash(&self) -> Digest {
        match self {
            ProvNode::Ingest { hash, .. }
            | ProvNode::Task { hash, .. }
            | ProvNode::Stub { hash, .. }
            | ProvNode::Missing { hash, .. } => *hash,
        }
    }

    pub fn children(&self) -> &[ProvEdge] {
        match self {
            ProvNode::Task { children, .. } | ProvNode::Stub { children, .. } => children,
            _ => &[],
        }
    }

    /// Root hash recomputed bottom-up from the visible fields; stubs
    /// contribute their recorded hash.
    pub fn recompute(&self) -> Digest {
        match self {
            ProvNode::Ingest { object, dataset, source_digest, label_hash, .. } => digest(json!({
                "kind": "ingest",
                "object": object,
                "dataset": dataset,
                "source_digest": source_digest,
                "label_hash": label_hash,
            })),
            ProvNode::Task {
                object, op, op_version, node, stage, params_hash, label_hash, declass_hash, children, ..
            } => {
                let kids: Vec<(&str, Digest)> = children.iter().map(|e| (e.role.as_str(), e.node.recompute())).collect();
                digest(json!({
                    "kind": "task",
                    "object": object,
                    "op": op,
                    "op_version": op_version,
                    "node": node,
                    "stage": stage,
                    "params_hash": params_hash,
                    "label_hash": label_hash,
                    "declass_hash": declass_hash,
                    "children": kids,
                }))
            }
            ProvNode::Stub { hash, .. } => *hash,
            ProvNode::Missing { object, .. } => missing_hash(object),
        }
    }

    /// Whether every readable node's hash matches its recomputation.
    pub fn verify(&self) -> bool {
        let own = match self {
            ProvNode::Stub { .. } => true,
            _ => self.recompute() == self.hash(),
        };
        own && self.children().iter().all(|e| e.node.verify())
    }

    /// Ingest records reachable from this node.
    pub fn leaves(&self) -> Vec<&ProvNode> {
        let mut out = Vec::new();
        fn walk<'a>(n: &'a ProvNode, out: &mut Vec<&'a ProvNode>) {
            if matches!(n, ProvNode::Ingest { .. }) {
                out.push(n);
            }
            for e in n.children() {
                walk(&e.node, out);
            }
        }
        walk(self, &mut out);
        out
    }

    /// Every object named anywhere in the visible tree.
    pub fn objects(&self) -> BTreeSet<Digest> {
        let mut out = BTreeSet::new();
        fn walk(n: &ProvNode, out: &mut BTreeSet<Digest>) {
            match n {
                ProvNode::Ingest { object, .. } | ProvNode::Task { object, .. } | ProvNode::Missing { object, .. } => {
                    out.insert(*object);
                }
                ProvNode::Stub { .. } => {}
            }
            for e in n.children() {
                walk(&e.node, out);
            }
        }
        walk(self, &mut out);
        out
    }
}

fn build(
    store: &Store,
    object: &Digest,
    path: &mut BTreeSet<Digest>,
    done: &mut HashMap<Digest, ProvNode>,
) -> Result<ProvNode, StoreError> {
    if let Some(n) = done.get(object) {
        return Ok(n.clone());
    }
    let missing = || ProvNode::Missing { hash: missing_hash(object), object: *object };
    // A record pointing back into its own ancestry cannot be expanded.
    if !path.insert(*object) {
        return Ok(missing());
    }
    let node = match store.prov_get(object)? {
        None => missing(),
        Some(rec) => {
            let value = store.get_json_value(&rec)?;
            match value.get("kind").and_then(|k| k.as_str()) {
                Some("ingest") => {
                    let r: IngestRecord = serde_json::from_value(value)?;
                    let label_hash = canonical_digest(&r.label)?;
                    let mut n = ProvNode::Ingest {
                        hash: Digest([0; 32]),
                        object: *object,
                        dataset: r.dataset,
                        source_digest: r.source_digest,
                        label_hash,
                        label: r.label,
                    };
                    set_hash(&mut n);
                    n
                }
                Some("task") => {
                    let r: TaskProv = serde_json::from_value(value)?;
                    let mut children = Vec::with_capacity(r.inputs.len());
                    for input in &r.inputs {
                        children.push(ProvEdge { role: input.role.clone(), node: build(store, &input.object, path, done)? });
                    }
                    let mut n = ProvNode::Task {
                        hash: Digest([0; 32]),
                        object: *object,
                        op: r.op,
                        op_version: r.op_version,
                        node: r.node,
                        stage: r.stage,
                        params_hash: r.params_hash,
                        label_hash: canonical_digest(&r.label)?,
                        label: r.label,
                        declass_hash: canonical_digest(&r.declassification)?,
                        declassification: r.declassification,
                        children,
                    };
                    set_hash(&mut n);
                    n
                }
                _ => missing(),
            }
        }
    };
    path.remove(object);
    done.insert(*object, node.clone());
    Ok(node)
}

fn set_hash(n: &mut ProvNode) {
    let h = n.recompute();
    match n {
        ProvNode::Ingest { hash, .. } | ProvNode::Task { hash, .. } => *hash = h,
        _ => {}
    }
}

/// Full provenance tree of a stored object, or `None` if the object is unknown.
pub fn provenance_of(store: &Store, object: &Digest) -> Result<Option<ProvNode>, StoreError> {
    if !store.has_object(object) {
        return Ok(None);
    }
    build(store, object, &mut BTreeSet::new(), &mut HashMap::new()).map(Some)
}

fn visible(label: &Label, principal: &Principal) -> Label {
    Label::from_tags(label.iter().filter(|t| principal.clearance.contains(*t)))
}

/// The tree as `principal` may see it at `at`: unreadable nodes become
/// hash stubs and tag names outside the principal's clearance are dropped.
pub fn filter_provenance(node: &ProvNode, principal: &Principal, tags: &TagSet, at: DateTime<Utc>) -> ProvNode {
    filter(node, principal, tags, at, false)
}

/// `hidden` is set below a stub: unlabelled nodes there could name secret inputs.
fn filter(node: &ProvNode, principal: &Principal, tags: &TagSet, at: DateTime<Utc>, hidden: bool) -> ProvNode {
    let kids = |children: &[ProvEdge], hidden: bool| -> Vec<ProvEdge> {
        children
            .iter()
            .map(|e| ProvEdge { role: e.role.clone(), node: filter(&e.node, principal, tags, at, hidden) })
            .collect()
    };
    match node {
        ProvNode::Ingest { label, .. } | ProvNode::Task { label, .. } if !can_flow(label, principal, tags, at) => {
            ProvNode::Stub { hash: node.hash(), children: kids(node.children(), true) }
        }
        ProvNode::Missing { hash, .. } if hidden => ProvNode::Stub { hash: *hash, children: Vec::new() },
        ProvNode::Stub { hash, children } => ProvNode::Stub { hash: *hash, children: kids(children, true) },
        ProvNode::Ingest { hash, object, dataset, source_digest, label_hash, label } => ProvNode::Ingest {
            hash: *hash,
            object: *object,
            dataset: dataset.clone(),
            source_digest: *source_digest,
            label_hash: *label_hash,
            label: visible(label, principal),
        },
        ProvNode::Task {
            hash,
            object,
            op,
            op_version,
            node,
            stage,
            params_hash,
            label_hash,
            label,
            declass_hash,
            declassification,
            children,
        } => ProvNode::Task {
            hash: *hash,
            object: *object,
            op: op.clone(),
            op_version: op_version.clone(),
            node: node.clone(),
            stage: stage.clone(),
            params_hash: *params_hash,
            label_hash: *label_hash,
            label: visible(label, principal),
            declass_hash: *declass_hash,
            declassification: declassification.as_ref().map(|d| Declassification {
                principal: d.principal.clone(),
                tags: d.tags.iter().filter(|t| principal.clearance.contains(*t)).cloned().collect(),
            }),
            children: kids(children, hidden),
        },
        other => other.clone(),
    }
}
