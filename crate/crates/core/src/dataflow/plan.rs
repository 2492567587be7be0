use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::doc::{NodeSpec, OpKind, PipelineDoc};
use super::DataflowError;
use crate::canonical::{canonical_digest, Digest};
use crate::catalog::{resolve, Dataset};
use crate::difc::{declassify, join_all, Declassification, Label, Principal};
use crate::expr::{parse, ExprProgram};
use crate::geo::GeoExtent;
use crate::ingest::points::PointSet;
use crate::ingest::polygons::PolygonSet;
use crate::ops::{self, diff_tiles, latest_time, zonal_tiles, Geometry, OpError, ReprojectIndex};
use crate::store::{DType, LayerVersion, Store, TileKey};

/// Manifest an input alias resolved to when the run started.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pinned {
    pub layer: String,
    pub manifest: Digest,
}

/// Output grid of a raster-valued node.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterShape {
    pub geom: Geometry,
    pub dtype: DType,
    pub nodata: Option<f64>,
    pub band_count: u32,
    pub time_stamp: String,
}

impl RasterShape {
    fn of(l: &LayerVersion) -> Self {
        RasterShape {
            geom: Geometry::of(l),
            dtype: l.dtype,
            nodata: l.nodata,
            band_count: l.band_count,
            time_stamp: l.time_stamp.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum NodeParams {
    Expr { prog: ExprProgram },
    ZonalStats { band: u32, raster: String, zones: String },
    RasterizePoints { min_count: u32, template: Geometry, points: String },
    TemporalDiff { pred: ExprProgram, aoi: Option<GeoExtent>, a: String, b: String },
    ReprojectNearest { target: Geometry, src: String, index: ReprojectIndex },
}

#[derive(Debug, Clone)]
pub struct NodePlan {
    pub id: String,
    pub op: OpKind,
    pub level: usize,
    pub params: NodeParams,
    /// Canonical parameters: expressions appear by AST hash.
    pub canonical_params: Value,
    pub params_hash: Digest,
    pub label: Label,
    pub declassification: Option<Declassification>,
    /// Output grid; `None` for table-valued nodes.
    pub shape: Option<RasterShape>,
    pub tasks: Vec<usize>,
    pub combine: Option<usize>,
}

/// Where a task input comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputRef {
    /// A whole stored object, such as a point or polygon set.
    Object(Digest),
    /// A chunk of a source layer or of an upstream node's raster.
    Tile { alias: String, key: TileKey },
    /// Output `output` of another task in this plan.
    Task { task: usize, output: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Tile(TileKey),
    Combine,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub id: usize,
    /// Index into [`Plan::nodes`].
    pub node: usize,
    pub kind: TaskKind,
    pub inputs: Vec<(String, InputRef)>,
    pub deps: Vec<usize>,
}

/// A validated pipeline expanded into per-tile and combine tasks.
#[derive(Debug, Clone)]
pub struct Plan {
    pub doc: PipelineDoc,
    pub doc_hash: Digest,
    pub pinned: BTreeMap<String, Pinned>,
    pub sources: BTreeMap<String, Dataset>,
    /// Nodes in dependency order.
    pub nodes: Vec<NodePlan>,
    pub tasks: Vec<Task>,
    tile_task: HashMap<(usize, TileKey), usize>,
}

impl Plan {
    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn levels(&self) -> usize {
        self.nodes.iter().map(|n| n.level + 1).max().unwrap_or(0)
    }

    /// Derived layer name of a node's raster output.
    pub fn layer_name(&self, node: usize) -> String {
        format!("{}-{}", self.doc.name, self.nodes[node].id)
    }
}

fn params<T: serde::de::DeserializeOwned>(node: &NodeSpec) -> Result<T, DataflowError> {
    serde_json::from_value(node.params.clone())
        .map_err(|e| DataflowError::InvalidDoc(format!("node {}: {e}", node.id)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExprParams {
    expr: String,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ZonalParams {
    #[serde(default = "one")]
    band: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RasterizeParams {
    min_count: u32,
    template: Geometry,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DiffParams {
    predicate: String,
    #[serde(default)]
    aoi: Option<GeoExtent>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReprojectParams {
    target: Geometry,
}

struct Planner<'a> {
    sources: &'a BTreeMap<String, Dataset>,
    nodes: Vec<NodePlan>,
    tasks: Vec<Task>,
    tile_task: HashMap<(usize, TileKey), usize>,
}

impl Planner<'_> {
    fn node_of(&self, alias: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == alias)
    }

    fn raster(&self, alias: &str) -> Result<(RasterShape, Label), DataflowError> {
        if let Some(i) = self.node_of(alias) {
            let n = &self.nodes[i];
            return match &n.shape {
                Some(s) => Ok((s.clone(), n.label.clone())),
                None => Err(DataflowError::NotARaster(alias.to_string())),
            };
        }
        match self.sources.get(alias) {
            Some(Dataset::Raster(l)) => Ok((RasterShape::of(l), l.label.clone())),
            _ => Err(DataflowError::NotARaster(alias.to_string())),
        }
    }

    fn points(&self, alias: &str) -> Result<&PointSet, DataflowError> {
        match self.sources.get(alias) {
            Some(Dataset::Points(p)) => Ok(p),
            _ => Err(DataflowError::InvalidDoc(format!("{alias} is not a point set"))),
        }
    }

    fn polygons(&self, alias: &str) -> Result<&PolygonSet, DataflowError> {
        match self.sources.get(alias) {
            Some(Dataset::Polygons(p)) => Ok(p),
            _ => Err(DataflowError::InvalidDoc(format!("{alias} is not a polygon set"))),
        }
    }

    fn manifest(&self, alias: &str) -> Digest {
        match &self.sources[alias] {
            Dataset::Raster(l) => l.manifest_hash(),
            Dataset::Points(p) => canonical_digest(p).expect("serializes"),
            Dataset::Polygons(p) => canonical_digest(p).expect("serializes"),
        }
    }

    fn tile_input(&self, alias: &str, key: TileKey) -> (InputRef, Option<usize>) {
        let dep = self.node_of(alias).map(|n| self.tile_task[&(n, key)]);
        (InputRef::Tile { alias: alias.to_string(), key }, dep)
    }

    fn push_task(&mut self, node: usize, kind: TaskKind, inputs: Vec<(String, InputRef, Option<usize>)>) -> usize {
        let id = self.tasks.len();
        let mut deps: Vec<usize> = inputs.iter().filter_map(|(_, _, d)| *d).collect();
        deps.sort_unstable();
        deps.dedup();
        let inputs = inputs.into_iter().map(|(r, i, _)| (r, i)).collect();
        self.tasks.push(Task { id, node, kind, inputs, deps });
        match kind {
            TaskKind::Tile(key) => {
                self.tile_task.insert((node, key), id);
                self.nodes[node].tasks.push(id);
            }
            TaskKind::Combine => self.nodes[node].combine = Some(id),
        }
        id
    }

    fn same_grid(&self, shapes: &[(&str, &RasterShape)]) -> Result<(), DataflowError> {
        if shapes.windows(2).any(|w| w[0].1.geom != w[1].1.geom) {
            return Err(OpError::GeometryMismatch.into());
        }
        Ok(())
    }

    fn add_node(&mut self, spec: &NodeSpec, level: usize, principal: Option<&Principal>) -> Result<(), DataflowError> {
        let arity = |n: usize| -> Result<(), DataflowError> {
            if spec.inputs.len() != n {
                return Err(DataflowError::InvalidDoc(format!("node {} takes {n} input(s)", spec.id)));
            }
            Ok(())
        };
        let mut input_labels = Vec::new();
        let (params, canonical, shape) = match spec.op {
            OpKind::Expr => {
                let p: ExprParams = params(spec)?;
                let prog = parse(&p.expr, &spec.inputs)?;
                if prog.bands().is_empty() {
                    return Err(DataflowError::InvalidDoc(format!("node {}: expression reads no band", spec.id)));
                }
                let mut shapes = Vec::new();
                for alias in &spec.inputs {
                    let (s, l) = self.raster(alias)?;
                    input_labels.push(l);
                    shapes.push((alias.as_str(), s));
                }
                let refs: Vec<(&str, &RasterShape)> = shapes.iter().map(|(a, s)| (*a, s)).collect();
                self.same_grid(&refs)?;
                for b in prog.bands() {
                    let (_, s) = shapes.iter().find(|(a, _)| *a == b.alias).expect("parsed against inputs");
                    if b.band > s.band_count {
                        return Err(OpError::BandOutOfRange { band: b.band, count: s.band_count }.into());
                    }
                }
                let first = &shapes[0].1;
                let shape = RasterShape {
                    geom: first.geom,
                    dtype: DType::F32,
                    nodata: Some(crate::expr::OUTPUT_NODATA),
                    band_count: 1,
                    time_stamp: latest_time(shapes.iter().map(|(_, s)| s.time_stamp.as_str())),
                };
                let canonical = json!({ "expr": prog.canonical_hash });
                (NodeParams::Expr { prog }, canonical, Some(shape))
            }
            OpKind::ZonalStats => {
                arity(2)?;
                let p: ZonalParams = params(spec)?;
                let (s, l) = self.raster(&spec.inputs[0])?;
                input_labels.push(l);
                let zones = self.polygons(&spec.inputs[1])?;
                input_labels.push(zones.label.clone());
                ops::check_lonlat(s.geom.crs)?;
                if p.band == 0 || p.band > s.band_count {
                    return Err(OpError::BandOutOfRange { band: p.band, count: s.band_count }.into());
                }
                let canonical = json!({ "band": p.band });
                let params = NodeParams::ZonalStats {
                    band: p.band,
                    raster: spec.inputs[0].clone(),
                    zones: spec.inputs[1].clone(),
                };
                (params, canonical, None)
            }
            OpKind::RasterizePoints => {
                arity(1)?;
                let p: RasterizeParams = params(spec)?;
                let points = self.points(&spec.inputs[0])?;
                input_labels.push(points.label.clone());
                if p.min_count == 0 {
                    return Err(OpError::InvalidParam("min_count must be at least 1".into()).into());
                }
                ops::check_lonlat(p.template.crs)?;
                p.template.validate()?;
                let shape = RasterShape {
                    geom: p.template,
                    dtype: DType::I32,
                    nodata: Some(ops::COUNT_NODATA),
                    band_count: 1,
                    time_stamp: points.time_stamp.clone(),
                };
                let canonical = json!({ "min_count": p.min_count, "template": p.template });
                let params =
                    NodeParams::RasterizePoints { min_count: p.min_count, template: p.template, points: spec.inputs[0].clone() };
                (params, canonical, Some(shape))
            }
            OpKind::TemporalDiff => {
                arity(2)?;
                let p: DiffParams = params(spec)?;
                let pred = parse(&p.predicate, &["A", "B"])?;
                let (sa, la) = self.raster(&spec.inputs[0])?;
                let (sb, lb) = self.raster(&spec.inputs[1])?;
                input_labels.extend([la, lb]);
                self.same_grid(&[("A", &sa), ("B", &sb)])?;
                for b in pred.bands() {
                    let count = if b.alias == "A" { sa.band_count } else { sb.band_count };
                    if b.band > count {
                        return Err(OpError::BandOutOfRange { band: b.band, count }.into());
                    }
                }
                let aoi = p
                    .aoi
                    .map(|e| GeoExtent::new(e.min_x, e.min_y, e.max_x, e.max_y))
                    .transpose()
                    .map_err(OpError::from)?;
                let shape = RasterShape {
                    geom: sa.geom,
                    dtype: DType::U8,
                    nodata: Some(ops::MASK_NODATA),
                    band_count: 1,
                    time_stamp: latest_time([sa.time_stamp.as_str(), sb.time_stamp.as_str()]),
                };
                let canonical = json!({ "predicate": pred.canonical_hash, "aoi": aoi });
                let params =
                    NodeParams::TemporalDiff { pred, aoi, a: spec.inputs[0].clone(), b: spec.inputs[1].clone() };
                (params, canonical, Some(shape))
            }
            OpKind::ReprojectNearest => {
                arity(1)?;
                let p: ReprojectParams = params(spec)?;
                let (s, l) = self.raster(&spec.inputs[0])?;
                input_labels.push(l);
                let index = ReprojectIndex::new(&s.geom, &p.target)?;
                let shape = RasterShape {
                    geom: p.target,
                    dtype: s.dtype,
                    nodata: Some(s.nodata.unwrap_or_else(|| s.dtype.default_nodata())),
                    band_count: s.band_count,
                    time_stamp: s.time_stamp.clone(),
                };
                let canonical = json!({ "target": p.target });
                let params = NodeParams::ReprojectNearest { target: p.target, src: spec.inputs[0].clone(), index };
                (params, canonical, Some(shape))
            }
        };
        let joined = join_all(&input_labels);
        let (label, declassification) = if spec.declassify.is_empty() {
            (joined, None)
        } else {
            let who = principal.ok_or(DataflowError::Unauthorized)?;
            let (l, ev) = declassify(&joined, who, &spec.declassify).map_err(|_| DataflowError::Unauthorized)?;
            (l, Some(ev))
        };
        let params_hash = canonical_digest(&canonical).expect("serializes");
        self.nodes.push(NodePlan {
            id: spec.id.clone(),
            op: spec.op,
            level,
            params,
            canonical_params: canonical,
            params_hash,
            label,
            declassification,
            shape,
            tasks: Vec::new(),
            combine: None,
        });
        self.expand(self.nodes.len() - 1);
        Ok(())
    }

    fn expand(&mut self, n: usize) {
        let node = self.nodes[n].clone();
        let grid = node.shape.as_ref().map(|s| s.geom.grid());
        match &node.params {
            NodeParams::Expr { prog } => {
                for (tx, ty) in grid.expect("raster").tiles() {
                    let inputs = prog
                        .bands()
                        .into_iter()
                        .map(|b| {
                            let (r, d) = self.tile_input(&b.alias, TileKey::new(b.band, tx, ty));
                            (b.to_string(), r, d)
                        })
                        .collect();
                    self.push_task(n, TaskKind::Tile(TileKey::new(1, tx, ty)), inputs);
                }
            }
            NodeParams::ZonalStats { band, raster, zones } => {
                let (shape, _) = self.raster(raster).expect("checked");
                let zone_ref = self.manifest(zones);
                let polys = self.polygons(zones).expect("checked").zones.clone();
                let mut partials = Vec::new();
                for (tx, ty) in zonal_tiles(&shape.geom, &polys) {
                    let (r, d) = self.tile_input(raster, TileKey::new(*band, tx, ty));
                    let inputs = vec![("raster".to_string(), r, d), ("zones".to_string(), InputRef::Object(zone_ref), None)];
                    partials.push((tx, ty, self.push_task(n, TaskKind::Tile(TileKey::new(*band, tx, ty)), inputs)));
                }
                let mut inputs = vec![("zones".to_string(), InputRef::Object(zone_ref), None)];
                for (tx, ty, t) in partials {
                    inputs.push((format!("tile/{tx}/{ty}"), InputRef::Task { task: t, output: 0 }, Some(t)));
                }
                self.push_task(n, TaskKind::Combine, inputs);
            }
            NodeParams::RasterizePoints { points, .. } => {
                let points_ref = self.manifest(points);
                for (tx, ty) in grid.expect("raster").tiles() {
                    let inputs = vec![("points".to_string(), InputRef::Object(points_ref), None)];
                    self.push_task(n, TaskKind::Tile(TileKey::new(1, tx, ty)), inputs);
                }
            }
            NodeParams::TemporalDiff { pred, a, b, aoi } => {
                let geom = node.shape.as_ref().expect("raster").geom;
                let active = diff_tiles(&geom, aoi.as_ref());
                let mut partials = Vec::new();
                for (tx, ty) in grid.expect("raster").tiles() {
                    // Tiles wholly outside the AOI read nothing.
                    let bands = if active.contains(&(tx, ty)) { pred.bands() } else { Default::default() };
                    let inputs = bands
                        .into_iter()
                        .map(|r| {
                            let alias = if r.alias == "A" { a } else { b };
                            let (i, d) = self.tile_input(alias, TileKey::new(r.band, tx, ty));
                            (r.to_string(), i, d)
                        })
                        .collect();
                    partials.push((tx, ty, self.push_task(n, TaskKind::Tile(TileKey::new(1, tx, ty)), inputs)));
                }
                let inputs = partials
                    .into_iter()
                    .map(|(tx, ty, t)| (format!("tile/{tx}/{ty}"), InputRef::Task { task: t, output: 1 }, Some(t)))
                    .collect();
                self.push_task(n, TaskKind::Combine, inputs);
            }
            NodeParams::ReprojectNearest { src, index, .. } => {
                let bands = node.shape.as_ref().expect("raster").band_count;
                for band in 1..=bands {
                    for (tx, ty) in grid.expect("raster").tiles() {
                        let inputs = index
                            .source_tiles(tx, ty)
                            .into_iter()
                            .map(|(sx, sy)| {
                                let (r, d) = self.tile_input(src, TileKey::new(band, sx, sy));
                                (format!("src/{sx}/{sy}"), r, d)
                            })
                            .collect();
                        self.push_task(n, TaskKind::Tile(TileKey::new(band, tx, ty)), inputs);
                    }
                }
            }
        }
    }
}

/// Resolves every input (pinning "latest"), validates node typing and
/// expands the graph into tasks in dependency order.
pub fn plan(store: &Store, doc: &PipelineDoc, principal: Option<&Principal>) -> Result<Plan, DataflowError> {
    doc.validate()?;
    let mut sources = BTreeMap::new();
    let mut pinned = BTreeMap::new();
    for (alias, spec) in &doc.inputs {
        let (manifest, ds) = resolve(store, &spec.layer, spec.version)?;
        pinned.insert(alias.clone(), Pinned { layer: spec.layer.clone(), manifest });
        sources.insert(alias.clone(), ds);
    }
    plan_with_sources(doc, pinned, sources, principal)
}

/// Plans against already-resolved inputs (used when replaying a bundle).
pub fn plan_with_sources(
    doc: &PipelineDoc,
    pinned: BTreeMap<String, Pinned>,
    sources: BTreeMap<String, Dataset>,
    principal: Option<&Principal>,
) -> Result<Plan, DataflowError> {
    doc.validate()?;
    let mut planner = Planner { sources: &sources, nodes: Vec::new(), tasks: Vec::new(), tile_task: HashMap::new() };
    for (i, level) in doc.topo_order()? {
        planner.add_node(&doc.nodes[i], level, principal)?;
    }
    let Planner { nodes, tasks, tile_task, .. } = planner;
    Ok(Plan { doc: doc.clone(), doc_hash: doc.hash(), pinned, sources, nodes, tasks, tile_task })
}

impl Plan {
    /// Task producing a node's tile, if the node has one.
    pub fn tile_task(&self, node: usize, key: TileKey) -> Option<usize> {
        self.tile_task.get(&(node, key)).copied()
    }
}
