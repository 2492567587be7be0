use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::DataflowError;
use crate::canonical::{canonical_digest, to_canonical_json, Digest};
use crate::catalog::VersionSelector;
use crate::store::valid_name;

/// A dataset pinned or floating by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub layer: String,
    #[serde(default = "latest")]
    pub version: VersionSelector,
}

fn latest() -> VersionSelector {
    VersionSelector::Latest
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Expr,
    ZonalStats,
    RasterizePoints,
    TemporalDiff,
    ReprojectNearest,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Expr => "expr",
            OpKind::ZonalStats => "zonal_stats",
            OpKind::RasterizePoints => "rasterize_points",
            OpKind::TemporalDiff => "temporal_diff",
            OpKind::ReprojectNearest => "reproject_nearest",
        }
    }

    pub fn version(self) -> &'static str {
        use crate::ops::versions::*;
        match self {
            OpKind::Expr => EXPR,
            OpKind::ZonalStats => ZONAL_STATS,
            OpKind::RasterizePoints => RASTERIZE_POINTS,
            OpKind::TemporalDiff => TEMPORAL_DIFF,
            OpKind::ReprojectNearest => REPROJECT_NEAREST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub op: OpKind,
    pub inputs: Vec<String>,
    #[serde(default = "empty_params")]
    pub params: Value,
    /// Tags removed from this node's output label; requires the running
    /// principal to hold a declassification capability for each.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub declassify: BTreeSet<String>,
}

fn empty_params() -> Value {
    Value::Object(Default::default())
}

/// Declarative pipeline: named inputs, an operator graph and the node ids
/// to publish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineDoc {
    pub name: String,
    pub inputs: BTreeMap<String, InputSpec>,
    pub nodes: Vec<NodeSpec>,
    pub outputs: Vec<String>,
}

/// Aliases usable as expression identifiers.
pub fn valid_alias(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && s != "NODATA"
        && s.len() <= 64
}

impl PipelineDoc {
    pub fn from_json(text: &str) -> Result<Self, DataflowError> {
        let doc: PipelineDoc = serde_json::from_str(text).map_err(|e| DataflowError::InvalidDoc(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_json(self).expect("doc serializes")
    }

    pub fn hash(&self) -> Digest {
        canonical_digest(self).expect("doc serializes")
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Structural checks: names, uniqueness, alias resolution, acyclicity.
    pub fn validate(&self) -> Result<(), DataflowError> {
        let invalid = |m: String| Err(DataflowError::InvalidDoc(m));
        if !valid_name(&self.name) {
            return invalid(format!("invalid pipeline name {:?}", self.name));
        }
        for (alias, spec) in &self.inputs {
            if !valid_alias(alias) {
                return invalid(format!("invalid input alias {alias:?}"));
            }
            if !valid_name(&spec.layer) {
                return invalid(format!("invalid layer name {:?}", spec.layer));
            }
        }
        let mut ids = BTreeSet::new();
        for node in &self.nodes {
            if !valid_alias(&node.id) {
                return invalid(format!("invalid node id {:?}", node.id));
            }
            if self.inputs.contains_key(&node.id) || !ids.insert(node.id.as_str()) {
                return invalid(format!("duplicate id {:?}", node.id));
            }
            if !node.params.is_object() {
                return invalid(format!("node {}: params must be an object", node.id));
            }
        }
        for node in &self.nodes {
            for input in &node.inputs {
                if !self.inputs.contains_key(input) && !ids.contains(input.as_str()) {
                    return Err(DataflowError::UnknownAlias(input.clone()));
                }
            }
        }
        if self.outputs.is_empty() {
            return invalid("no outputs".into());
        }
        for out in &self.outputs {
            if !ids.contains(out.as_str()) {
                return Err(DataflowError::UnknownAlias(out.clone()));
            }
        }
        self.topo_order().map(|_| ())
    }

    /// Node indices in dependency order, with the level (longest path from a
    /// source) of each.
    pub fn topo_order(&self) -> Result<Vec<(usize, usize)>, DataflowError> {
        let index: BTreeMap<&str, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let mut level: Vec<Option<usize>> = vec![None; self.nodes.len()];
        let mut state = vec![0u8; self.nodes.len()];
        fn visit(
            i: usize,
            doc: &PipelineDoc,
            index: &BTreeMap<&str, usize>,
            state: &mut [u8],
            level: &mut [Option<usize>],
        ) -> Result<usize, DataflowError> {
            match state[i] {
                2 => return Ok(level[i].expect("visited")),
                1 => return Err(DataflowError::Cycle(doc.nodes[i].id.clone())),
                _ => {}
            }
            state[i] = 1;
            let mut l = 0;
            for input in &doc.nodes[i].inputs {
                if let Some(&j) = index.get(input.as_str()) {
                    l = l.max(visit(j, doc, index, state, level)? + 1);
                }
            }
            state[i] = 2;
            level[i] = Some(l);
            Ok(l)
        }
        for i in 0..self.nodes.len() {
            visit(i, self, &index, &mut state, &mut level)?;
        }
        let mut order: Vec<(usize, usize)> = level.into_iter().enumerate().map(|(i, l)| (i, l.expect("visited"))).collect();
        order.sort_by_key(|&(i, l)| (l, i));
        Ok(order)
    }
}
