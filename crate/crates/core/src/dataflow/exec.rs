use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use chrono::Utc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::doc::{OpKind, PipelineDoc};
use super::plan::{plan, InputRef, NodeParams, Pinned, Plan, Task, TaskKind};
use super::provenance::{ProvInput, TaskProv};
use super::DataflowError;
use crate::canonical::{canonical_digest, to_canonical_json, Digest};
use crate::catalog::Dataset;
use crate::difc::{Declassification, Label, Principal};
use crate::expr::{eval_chunk, BandRef, OUTPUT_NODATA};
use crate::ingest::utc_string;
use crate::ops::{
    derived_layer, diff_tile, empty_mask, mask_padding, rasterize_tile, reproject_tile, zonal_combine, zonal_tile,
    DiffPartial, Geometry, ZonalResult, ZoneAcc,
};
use crate::store::{Chunk, ChunkRef, LayerVersion, Store, StoreError, TileKey};
use crate::ENGINE_VERSION;

pub struct ExecOptions<'a> {
    pub workers: usize,
    /// Needed only when the document declassifies.
    pub principal: Option<&'a Principal>,
    /// Defaults to a fresh UUID.
    pub run_id: Option<String>,
}

impl Default for ExecOptions<'_> {
    fn default() -> Self {
        ExecOptions { workers: 1, principal: None, run_id: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Executed,
    CacheHit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRun {
    pub node: String,
    /// `None` for combine tasks.
    pub tile: Option<TileKey>,
    pub memo_key: Digest,
    pub inputs: Vec<ProvInput>,
    pub outputs: Vec<Digest>,
    pub status: TaskStatus,
    pub wall_micros: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Raster,
    ZonalStats,
    TemporalDiff,
}

/// Stored result of a temporal_diff node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffSummary {
    pub kind: String,
    pub label: Label,
    pub mask: Digest,
    pub changed_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeOutput {
    pub node: String,
    pub kind: OutputKind,
    /// Layer manifest, zonal result or diff summary.
    pub object: Digest,
    pub label: Label,
    #[serde(default)]
    pub declassification: Option<Declassification>,
}

/// Everything needed to audit and replay one execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub run_id: String,
    pub pipeline: String,
    pub doc_hash: Digest,
    pub doc: PipelineDoc,
    pub engine_version: String,
    pub pinned: BTreeMap<String, Pinned>,
    pub tasks: Vec<TaskRun>,
    pub executed: usize,
    pub cache_hits: usize,
    pub nodes: Vec<NodeOutput>,
    /// Published node id to output object.
    pub outputs: BTreeMap<String, Digest>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunRecord {
    pub fn node(&self, id: &str) -> Option<&NodeOutput> {
        self.nodes.iter().find(|n| n.node == id)
    }

    pub fn load(store: &Store, run_id: &str) -> Result<Option<(Digest, RunRecord)>, StoreError> {
        match store.run_get(run_id)? {
            Some(d) => Ok(Some((d, store.get_json(&d)?))),
            None => Ok(None),
        }
    }
}

/// Content key of a task: operator, version, parameters and input digests
/// by role.
pub fn memo_key(op: OpKind, params: &Value, inputs: &[(String, Digest)]) -> Digest {
    let mut roles: Vec<String> = inputs.iter().map(|(r, d)| format!("{r}={d}")).collect();
    roles.sort();
    canonical_digest(&json!({
        "op": op.name(),
        "version": op.version(),
        "params": params,
        "inputs": roles,
    }))
    .expect("serializes")
}

fn cached(store: &Store, key: &Digest) -> Result<Option<Vec<Digest>>, StoreError> {
    let Some(bytes) = store.memo_get(key)? else { return Ok(None) };
    let Ok(outputs) = serde_json::from_slice::<Vec<Digest>>(&bytes) else { return Ok(None) };
    Ok(outputs.iter().all(|d| store.has_object(d)).then_some(outputs))
}

struct Ctx<'a> {
    store: &'a Store,
    plan: &'a Plan,
    layers: HashMap<usize, LayerVersion>,
}

impl Ctx<'_> {
    fn layer(&self, alias: &str) -> Option<&LayerVersion> {
        match self.plan.node_index(alias) {
            Some(n) => self.layers.get(&n),
            None => self.plan.sources.get(alias).and_then(Dataset::as_raster),
        }
    }

    fn geom(&self, alias: &str) -> Geometry {
        Geometry::of(self.layer(alias).expect("upstream assembled"))
    }

    fn resolve(&self, input: &InputRef, results: &[Option<TaskRun>]) -> Result<Digest, DataflowError> {
        Ok(match input {
            InputRef::Object(d) => *d,
            InputRef::Tile { alias, key } => {
                let layer = self.layer(alias).ok_or_else(|| DataflowError::NotARaster(alias.clone()))?;
                layer
                    .chunks
                    .get(key)
                    .ok_or_else(|| StoreError::IncompleteManifest(layer.layer_name.clone()))?
                    .0
            }
            InputRef::Task { task, output } => {
                let run = results[*task].as_ref().expect("dependency ran");
                *run.outputs.get(*output).ok_or_else(|| DataflowError::Corrupt(format!("task {task}")))?
            }
        })
    }

    /// Task-level parameters folded into the memo key on top of the node's.
    fn task_params(&self, task: &Task) -> Value {
        let node = &self.plan.nodes[task.node];
        let mut p = node.canonical_params.clone();
        let extra = match (&node.params, task.kind) {
            (_, TaskKind::Combine) => match node.params {
                NodeParams::ZonalStats { .. } => json!({ "stage": "combine", "label": node.label }),
                _ => json!({ "stage": "combine" }),
            },
            (NodeParams::Expr { .. }, TaskKind::Tile(k)) => {
                let (_, _, w, h) = node.shape.as_ref().expect("raster").geom.grid().tile_window(k.tile_x, k.tile_y);
                json!({ "stage": "tile", "window": [w, h] })
            }
            (NodeParams::ZonalStats { raster, .. }, TaskKind::Tile(k)) => {
                json!({ "stage": "tile", "geometry": self.geom(raster), "tile": [k.tile_x, k.tile_y] })
            }
            (NodeParams::RasterizePoints { .. }, TaskKind::Tile(k)) => {
                json!({ "stage": "tile", "tile": [k.tile_x, k.tile_y] })
            }
            (NodeParams::TemporalDiff { .. }, TaskKind::Tile(k)) => {
                let geom = node.shape.as_ref().expect("raster").geom;
                json!({ "stage": "tile", "geometry": geom, "tile": [k.tile_x, k.tile_y] })
            }
            (NodeParams::ReprojectNearest { src, .. }, TaskKind::Tile(k)) => {
                let shape = node.shape.as_ref().expect("raster");
                json!({
                    "stage": "tile",
                    "source": self.geom(src),
                    "tile": [k.tile_x, k.tile_y],
                    "dtype": shape.dtype,
                    "nodata": shape.nodata,
                })
            }
        };
        let obj = p.as_object_mut().expect("object params");
        for (k, v) in extra.as_object().expect("object").clone() {
            obj.insert(k, v);
        }
        p
    }

    fn chunks(&self, inputs: &[(String, Digest)]) -> Result<Vec<Chunk>, StoreError> {
        inputs.iter().map(|(_, d)| self.store.get_chunk(&ChunkRef(*d))).collect()
    }

    fn compute(&self, task: &Task, inputs: &[(String, Digest)]) -> Result<Vec<Digest>, DataflowError> {
        let store = self.store;
        let node = &self.plan.nodes[task.node];
        let tile = match task.kind {
            TaskKind::Tile(k) => Some(k),
            TaskKind::Combine => None,
        };
        let outputs = match (&node.params, tile) {
            (NodeParams::Expr { prog }, Some(k)) => {
                let chunks = self.chunks(inputs)?;
                let map: BTreeMap<BandRef, &Chunk> = prog.bands().into_iter().zip(chunks.iter()).collect();
                let mut out = eval_chunk(prog, &map)?;
                let grid = node.shape.as_ref().expect("raster").geom.grid();
                mask_padding(&mut out, &grid, k.tile_x, k.tile_y, OUTPUT_NODATA);
                vec![store.put_chunk(&out)?.0]
            }
            (NodeParams::ZonalStats { raster, zones, .. }, Some(k)) => {
                let chunk = store.get_chunk(&ChunkRef(inputs[0].1))?;
                let Some(Dataset::Polygons(z)) = self.plan.sources.get(zones) else { unreachable!("planned") };
                let acc = zonal_tile(&chunk, &self.geom(raster), k.tile_x, k.tile_y, &z.zones);
                vec![store.put_json(&acc)?]
            }
            (NodeParams::ZonalStats { zones, .. }, None) => {
                let Some(Dataset::Polygons(z)) = self.plan.sources.get(zones) else { unreachable!("planned") };
                let partials = inputs[1..]
                    .iter()
                    .map(|(_, d)| store.get_json::<Vec<ZoneAcc>>(d))
                    .collect::<Result<Vec<_>, _>>()?;
                if partials.iter().any(|p| p.len() != z.zones.len()) {
                    return Err(DataflowError::Corrupt("zonal partial size".into()));
                }
                let result = ZonalResult { label: node.label.clone(), zones: zonal_combine(&z.zones, &partials) };
                vec![store.put_json(&result)?]
            }
            (NodeParams::RasterizePoints { min_count, template, points }, Some(k)) => {
                let Some(Dataset::Points(p)) = self.plan.sources.get(points) else { unreachable!("planned") };
                vec![store.put_chunk(&rasterize_tile(&p.records, template, k.tile_x, k.tile_y, *min_count))?.0]
            }
            (NodeParams::TemporalDiff { pred, aoi, .. }, Some(k)) => {
                let (mask, changed) = if inputs.is_empty() {
                    (empty_mask(), 0)
                } else {
                    let chunks = self.chunks(inputs)?;
                    let map: BTreeMap<BandRef, &Chunk> = pred.bands().into_iter().zip(chunks.iter()).collect();
                    let geom = node.shape.as_ref().expect("raster").geom;
                    diff_tile(pred, &map, &geom, k.tile_x, k.tile_y, aoi.as_ref())?
                };
                vec![store.put_chunk(&mask)?.0, store.put_json(&DiffPartial { changed })?]
            }
            (NodeParams::TemporalDiff { .. }, None) => {
                let mut total = 0;
                for (_, d) in inputs {
                    total += store.get_json::<DiffPartial>(d)?.changed;
                }
                vec![store.put_json(&json!({ "changed_count": total }))?]
            }
            (NodeParams::ReprojectNearest { index, .. }, Some(k)) => {
                let chunks = self.chunks(inputs)?;
                let mut map = BTreeMap::new();
                for ((role, _), c) in inputs.iter().zip(chunks.iter()) {
                    let mut parts = role.split('/').skip(1).map(|s| s.parse::<u32>());
                    match (parts.next(), parts.next()) {
                        (Some(Ok(sx)), Some(Ok(sy))) => map.insert((sx, sy), c),
                        _ => return Err(DataflowError::Corrupt(format!("role {role}"))),
                    };
                }
                let shape = node.shape.as_ref().expect("raster");
                let nodata = shape.nodata.expect("reprojection sets nodata");
                vec![store.put_chunk(&reproject_tile(index, &map, k.tile_x, k.tile_y, shape.dtype, nodata))?.0]
            }
            (_, None) => unreachable!("only zonal and diff nodes combine"),
        };
        Ok(outputs)
    }

    fn record(&self, task: &Task, stage: &str, params_hash: Digest, inputs: &[ProvInput], outputs: &[Digest]) -> Result<(), StoreError> {
        let node = &self.plan.nodes[task.node];
        let rec = TaskProv {
            kind: "task".into(),
            op: node.op.name().into(),
            op_version: node.op.version().into(),
            node: node.id.clone(),
            stage: stage.into(),
            params_hash,
            label: node.label.clone(),
            declassification: node.declassification.clone(),
            inputs: inputs.to_vec(),
        };
        let mut digest = None;
        for out in outputs {
            if self.store.prov_get(out)?.is_none() {
                let d = match digest {
                    Some(d) => d,
                    None => *digest.insert(self.store.put_json(&rec)?),
                };
                self.store.prov_put(out, &d)?;
            }
        }
        Ok(())
    }
}

struct Prepared {
    task: usize,
    key: Digest,
    params_hash: Digest,
    inputs: Vec<(String, Digest)>,
}

fn run_stage(
    ctx: &Ctx<'_>,
    pool: &rayon::ThreadPool,
    ids: &[usize],
    results: &mut [Option<TaskRun>],
) -> Result<(), DataflowError> {
    let mut prepared = Vec::with_capacity(ids.len());
    for &t in ids {
        let task = &ctx.plan.tasks[t];
        let inputs = task
            .inputs
            .iter()
            .map(|(role, r)| Ok((role.clone(), ctx.resolve(r, results)?)))
            .collect::<Result<Vec<_>, DataflowError>>()?;
        let params = ctx.task_params(task);
        let key = memo_key(ctx.plan.nodes[task.node].op, &params, &inputs);
        let params_hash = canonical_digest(&params).expect("serializes");
        prepared.push(Prepared { task: t, key, params_hash, inputs });
    }
    // Equal keys within a stage compute once; the rest count as hits.
    let mut first: HashMap<Digest, usize> = HashMap::new();
    let leaders: Vec<&Prepared> = prepared.iter().filter(|p| first.insert(p.key, p.task).is_none()).collect();
    let done: Vec<Result<(usize, Vec<Digest>, TaskStatus, u64), DataflowError>> = pool.install(|| {
        leaders
            .par_iter()
            .map(|p| {
                let start = Instant::now();
                let task = &ctx.plan.tasks[p.task];
                let (outputs, status) = match cached(ctx.store, &p.key)? {
                    Some(o) => (o, TaskStatus::CacheHit),
                    None => {
                        let o = ctx.compute(task, &p.inputs)?;
                        ctx.store.memo_put(&p.key, &to_canonical_json(&o).expect("serializes"))?;
                        (o, TaskStatus::Executed)
                    }
                };
                let stage = if task.kind == TaskKind::Combine { "combine" } else { "tile" };
                let prov: Vec<ProvInput> =
                    p.inputs.iter().map(|(role, object)| ProvInput { role: role.clone(), object: *object }).collect();
                ctx.record(task, stage, p.params_hash, &prov, &outputs)?;
                Ok((p.task, outputs, status, start.elapsed().as_micros() as u64))
            })
            .collect()
    });
    let mut by_key: HashMap<Digest, Vec<Digest>> = HashMap::new();
    let mut runs: HashMap<usize, (Vec<Digest>, TaskStatus, u64)> = HashMap::new();
    for r in done {
        let (t, outputs, status, micros) = r?;
        by_key.insert(prepared.iter().find(|p| p.task == t).expect("prepared").key, outputs.clone());
        runs.insert(t, (outputs, status, micros));
    }
    for p in prepared {
        let task = &ctx.plan.tasks[p.task];
        let (outputs, status, wall_micros) =
            runs.remove(&p.task).unwrap_or_else(|| (by_key[&p.key].clone(), TaskStatus::CacheHit, 0));
        results[p.task] = Some(TaskRun {
            node: ctx.plan.nodes[task.node].id.clone(),
            tile: match task.kind {
                TaskKind::Tile(k) => Some(k),
                TaskKind::Combine => None,
            },
            memo_key: p.key,
            inputs: p.inputs.into_iter().map(|(role, object)| ProvInput { role, object }).collect(),
            outputs,
            status,
            wall_micros,
        });
    }
    Ok(())
}

fn assemble(ctx: &mut Ctx<'_>, n: usize, results: &[Option<TaskRun>]) -> Result<NodeOutput, DataflowError> {
    let plan = ctx.plan;
    let store = ctx.store;
    let node = &plan.nodes[n];
    let prov = |object: Digest, inputs: Vec<ProvInput>| -> Result<(), StoreError> {
        let rec = TaskProv {
            kind: "task".into(),
            op: node.op.name().into(),
            op_version: node.op.version().into(),
            node: node.id.clone(),
            stage: "assemble".into(),
            params_hash: node.params_hash,
            label: node.label.clone(),
            declassification: node.declassification.clone(),
            inputs,
        };
        store.prov_put(&object, &store.put_json(&rec)?)
    };
    let mut raster = None;
    if let Some(shape) = &node.shape {
        let mut chunks = BTreeMap::new();
        for &t in &node.tasks {
            let TaskKind::Tile(k) = plan.tasks[t].kind else { continue };
            chunks.insert(k, ChunkRef(results[t].as_ref().expect("ran").outputs[0]));
        }
        let layer = derived_layer(
            &plan.layer_name(n),
            &shape.geom,
            shape.dtype,
            shape.nodata,
            shape.band_count,
            &shape.time_stamp,
            node.label.clone(),
            chunks,
        );
        let manifest = store.put_layer(&layer)?;
        let inputs = layer
            .chunks
            .iter()
            .map(|(k, r)| ProvInput { role: format!("{}/{}/{}", k.band, k.tile_x, k.tile_y), object: r.0 })
            .collect();
        prov(manifest, inputs)?;
        ctx.layers.insert(n, layer);
        raster = Some(manifest);
    }
    let combined = node.combine.map(|t| results[t].as_ref().expect("ran").outputs[0]);
    let (kind, object) = match node.op {
        OpKind::ZonalStats => (OutputKind::ZonalStats, combined.expect("combine task")),
        OpKind::TemporalDiff => {
            let count = combined.expect("combine task");
            let changed_count = store
                .get_json_value(&count)?
                .get("changed_count")
                .and_then(Value::as_u64)
                .ok_or_else(|| DataflowError::Corrupt("diff count".into()))?;
            let mask = raster.expect("diff mask");
            let summary =
                DiffSummary { kind: "temporal_diff".into(), label: node.label.clone(), mask, changed_count };
            let d = store.put_json(&summary)?;
            prov(
                d,
                vec![
                    ProvInput { role: "mask".into(), object: mask },
                    ProvInput { role: "count".into(), object: count },
                ],
            )?;
            (OutputKind::TemporalDiff, d)
        }
        _ => (OutputKind::Raster, raster.expect("raster node")),
    };
    Ok(NodeOutput {
        node: node.id.clone(),
        kind,
        object,
        label: node.label.clone(),
        declassification: node.declassification.clone(),
    })
}

/// Runs a planned pipeline level by level, reusing memoized tasks, and
/// stores the run record under `runs/<run_id>`.
pub fn execute_plan(store: &Store, plan: &Plan, opts: &ExecOptions<'_>) -> Result<(Digest, RunRecord), DataflowError> {
    let started_at = utc_string(Utc::now());
    let run_id = opts.run_id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| DataflowError::InvalidDoc(e.to_string()))?;
    let mut ctx = Ctx { store, plan, layers: HashMap::new() };
    let mut results: Vec<Option<TaskRun>> = vec![None; plan.tasks.len()];
    let mut nodes = Vec::new();
    for level in 0..plan.levels() {
        let at: Vec<usize> = (0..plan.nodes.len()).filter(|&n| plan.nodes[n].level == level).collect();
        let tiles: Vec<usize> = at.iter().flat_map(|&n| plan.nodes[n].tasks.iter().copied()).collect();
        run_stage(&ctx, &pool, &tiles, &mut results)?;
        let combines: Vec<usize> = at.iter().filter_map(|&n| plan.nodes[n].combine).collect();
        run_stage(&ctx, &pool, &combines, &mut results)?;
        for n in at {
            nodes.push(assemble(&mut ctx, n, &results)?);
        }
    }
    let tasks: Vec<TaskRun> = results.into_iter().map(|r| r.expect("every task ran")).collect();
    let executed = tasks.iter().filter(|t| t.status == TaskStatus::Executed).count();
    let outputs = plan
        .doc
        .outputs
        .iter()
        .map(|id| (id.clone(), nodes.iter().find(|n: &&NodeOutput| &n.node == id).expect("validated").object))
        .collect();
    let record = RunRecord {
        kind: "run".into(),
        run_id: run_id.clone(),
        pipeline: plan.doc.name.clone(),
        doc_hash: plan.doc_hash,
        doc: plan.doc.clone(),
        engine_version: ENGINE_VERSION.into(),
        pinned: plan.pinned.clone(),
        cache_hits: tasks.len() - executed,
        executed,
        tasks,
        nodes,
        outputs,
        started_at,
        finished_at: utc_string(Utc::now()),
    };
    let digest = store.put_json(&record)?;
    store.run_put(&run_id, &digest)?;
    Ok((digest, record))
}

/// Plans and executes a document against the store's current refs.
pub fn execute(store: &Store, doc: &PipelineDoc, opts: &ExecOptions<'_>) -> Result<(Digest, RunRecord), DataflowError> {
    let plan = plan(store, doc, opts.principal)?;
    execute_plan(store, &plan, opts)
}
