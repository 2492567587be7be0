//! `ark`: ingest, inspect, run, serve, export and verify.

mod output;

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use ark_core::catalog::{resolve, versions, Dataset, VersionSelector};
use ark_core::dataflow::{execute, ExecOptions, PipelineDoc};
use ark_core::difc::TagSet;
use ark_core::expr::parse;
use ark_core::geo::GeoExtent;
use ark_core::ingest::{import, IngestSpec, SourceKind};
use ark_core::ops::{temporal_diff, zonal_stats};
use ark_core::publish::{export_bundle, verify_bundle, ExportOptions, Reader};
use ark_core::{Label, Principal, Registry, Store};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use output::Out;
use serde_json::json;

#[derive(Parser)]
#[command(name = "ark", version, about = "Content-addressed geospatial pipelines with label-based access control")]
struct Cli {
    /// Store directory.
    #[arg(long, global = true, default_value = "ark-data")]
    data_dir: PathBuf,
    /// Directory holding tags.json and principals.json.
    #[arg(long, global = true, default_value = "ark-registry")]
    registry_dir: PathBuf,
    /// Line-delimited JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Geotiff,
    Points,
    Polygons,
}

#[derive(Subcommand)]
enum Cmd {
    /// Import a GeoTIFF, points CSV or GeoJSON polygon file as a new version.
    Ingest {
        #[arg(long)]
        layer: String,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Comma-separated secrecy tags; empty for public data.
        #[arg(long, value_delimiter = ',', default_value = "")]
        label: Vec<String>,
        #[arg(long)]
        file: PathBuf,
        /// Observation time (RFC 3339). Defaults to the Unix epoch.
        #[arg(long, value_parser = parse_time)]
        time: Option<DateTime<Utc>>,
    },
    /// List layers, or the versions of one layer.
    Ls { layer: Option<String> },
    /// Execute a pipeline document.
    Run {
        doc: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=256))]
        workers: u32,
        /// Principal whose declassification capabilities the run may use.
        #[arg(long = "as")]
        principal: Option<String>,
    },
    /// One-off analyses outside a pipeline.
    Query {
        #[command(subcommand)]
        query: Query,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=256))]
        workers: u32,
    },
    /// Write a reproduction bundle for a run.
    Export {
        #[arg(long)]
        run: String,
        #[arg(long)]
        out: PathBuf,
        /// Stub inputs the reader may not see instead of failing.
        #[arg(long)]
        redact: bool,
        /// Principal the bundle is exported for.
        #[arg(long = "as")]
        principal: Option<String>,
    },
    /// Check a bundle and replay its pipeline.
    Verify {
        dir: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=256))]
        workers: u32,
    },
}

#[derive(Subcommand)]
enum Query {
    /// Per-zone statistics of one raster band.
    Zonal {
        #[arg(long)]
        layer: String,
        #[arg(long, default_value = "latest")]
        version: VersionSelector,
        /// Polygon layer holding the zones.
        #[arg(long)]
        zones: String,
        #[arg(long, default_value_t = 1)]
        band: u32,
    },
    /// Count changed cells between two versions of a layer.
    Diff {
        #[arg(long)]
        layer: String,
        /// Older version; defaults to the one before `--to`.
        #[arg(long)]
        from: Option<VersionSelector>,
        #[arg(long, default_value = "latest")]
        to: VersionSelector,
        /// Expression over A (old) and B (new); nonzero means changed.
        #[arg(long, default_value = "A.b1 != B.b1")]
        predicate: String,
        /// min_x,min_y,max_x,max_y
        #[arg(long, value_parser = parse_aoi)]
        aoi: Option<GeoExtent>,
    },
}

fn parse_time(s: &str) -> Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc)).map_err(|e| e.to_string())
}

fn parse_aoi(s: &str) -> Result<GeoExtent, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match v[..] {
        [a, b, c, d] => GeoExtent::new(a, b, c, d).map_err(|e| e.to_string()),
        _ => Err("expected four comma-separated numbers".into()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let out = Out::new(cli.json);
    match dispatch(&cli, &out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn open_store(dir: &Path) -> Result<Store> {
    Store::open(dir).with_context(|| format!("opening store at {}", dir.display()))
}

fn load_registry(dir: &Path) -> Result<Registry> {
    Registry::load(dir).with_context(|| format!("loading registry from {}", dir.display()))
}

fn find_principal(reg: &Registry, id: &str) -> Result<Principal> {
    reg.principal(id).cloned().ok_or_else(|| anyhow!("unknown principal {id}"))
}

fn dispatch(cli: &Cli, out: &Out) -> Result<ExitCode> {
    match &cli.cmd {
        Cmd::Ingest { layer, kind, label, file, time } => {
            let store = open_store(&cli.data_dir)?;
            let source_kind = match kind {
                Kind::Geotiff => SourceKind::Geotiff,
                Kind::Points => SourceKind::PointsCsv,
                Kind::Polygons => SourceKind::GeojsonPolygons,
            };
            let spec = IngestSpec {
                layer_name: layer.clone(),
                source_path: file.clone(),
                source_kind,
                label: Label::from_tags(label.iter().map(|t| t.trim()).filter(|t| !t.is_empty())),
                time_stamp: time.unwrap_or(DateTime::UNIX_EPOCH),
            };
            let imported = import(&store, &spec, Utc::now())?;
            out.record(
                json!({
                    "layer": layer,
                    "kind": imported.dataset.kind(),
                    "manifest": imported.manifest,
                    "commit": imported.commit,
                    "source_digest": imported.source_digest,
                }),
                format!("{}", imported.manifest),
            );
        }
        Cmd::Ls { layer: None } => {
            let store = open_store(&cli.data_dir)?;
            let mut rows = Vec::new();
            for name in store.list_refs()? {
                let (manifest, ds) = resolve(&store, &name, VersionSelector::Latest)?;
                rows.push(output::dataset_row(&name, manifest, &ds));
            }
            out.table(&["NAME", "KIND", "MANIFEST", "TIME", "LABEL"], rows);
        }
        Cmd::Ls { layer: Some(name) } => {
            let store = open_store(&cli.data_dir)?;
            let mut rows = Vec::new();
            for (manifest, commit) in versions(&store, name)? {
                let ds = ark_core::catalog::load_dataset(&store, &manifest)?;
                let mut row = output::dataset_row(name, manifest, &ds);
                row.insert("created_at".into(), json!(commit.created_at));
                rows.push(row);
            }
            out.table(&["MANIFEST", "KIND", "TIME", "CREATED_AT", "LABEL"], rows);
        }
        Cmd::Run { doc, workers, principal } => {
            let store = open_store(&cli.data_dir)?;
            let text = std::fs::read_to_string(doc).with_context(|| format!("reading {}", doc.display()))?;
            let doc = PipelineDoc::from_json(&text)?;
            let who = match principal {
                Some(id) => Some(find_principal(&load_registry(&cli.registry_dir)?, id)?),
                None => None,
            };
            let opts = ExecOptions { workers: *workers as usize, principal: who.as_ref(), run_id: None };
            let (digest, record) = execute(&store, &doc, &opts)?;
            out.record(
                json!({
                    "run_id": record.run_id,
                    "record": digest,
                    "executed": record.executed,
                    "cache_hits": record.cache_hits,
                    "outputs": record.outputs,
                }),
                format!("run_id={} executed={} cache_hits={}", record.run_id, record.executed, record.cache_hits),
            );
            if !out.json {
                for (node, object) in &record.outputs {
                    println!("output {node} {object}");
                }
            }
        }
        Cmd::Query { query: Query::Zonal { layer, version, zones, band } } => {
            let store = open_store(&cli.data_dir)?;
            let raster = match resolve(&store, layer, *version)?.1 {
                Dataset::Raster(l) => l,
                other => bail!("{} is a {} layer, not a raster", layer, other.kind()),
            };
            let zones = match resolve(&store, zones, VersionSelector::Latest)?.1 {
                Dataset::Polygons(p) => p,
                other => bail!("{} is a {} layer, not polygons", zones, other.kind()),
            };
            let result = zonal_stats(&store, &raster, *band, &zones)?;
            let rows = result.zones.iter().map(|z| serde_json::to_value(z).unwrap().as_object().unwrap().clone()).collect();
            out.table(&["ZONE", "COUNT", "SUM", "MEAN", "MIN", "MAX"], rows);
        }
        Cmd::Query { query: Query::Diff { layer, from, to, predicate, aoi } } => {
            let store = open_store(&cli.data_dir)?;
            let (to_manifest, b) = resolve(&store, layer, *to)?;
            let from = match from {
                Some(v) => *v,
                None => {
                    let list = versions(&store, layer)?;
                    let pos = list.iter().position(|(m, _)| *m == to_manifest).unwrap_or(0);
                    let (m, _) = list.get(pos + 1).ok_or_else(|| anyhow!("{layer} has no version before {to_manifest}"))?;
                    VersionSelector::Pinned(*m)
                }
            };
            let (from_manifest, a) = resolve(&store, layer, from)?;
            let (Dataset::Raster(a), Dataset::Raster(b)) = (a, b) else { bail!("{layer} is not a raster layer") };
            let pred = parse(predicate, &["A", "B"])?;
            let diff = temporal_diff(&store, &a, &b, &pred, aoi.as_ref(), &format!("{layer}-diff"))?;
            let mask = store.put_layer(&diff.mask)?;
            out.record(
                json!({ "layer": layer, "from": from_manifest, "to": to_manifest, "changed_count": diff.changed_count, "mask": mask }),
                format!("changed_count={} mask={mask}", diff.changed_count),
            );
        }
        Cmd::Serve { port, bind, workers } => {
            let mut config = ark_service::Config::new(&cli.data_dir, &cli.registry_dir);
            config.workers = *workers as usize;
            config.clock = ark_service::Clock::from_env().map_err(|e| anyhow!(e))?;
            let service = ark_service::Service::open(config)?;
            let addr = SocketAddr::new(*bind, *port);
            out.record(json!({ "listening": addr.to_string() }), format!("listening on http://{addr}"));
            tokio::runtime::Runtime::new()?.block_on(ark_service::serve(service, addr))?;
        }
        Cmd::Export { run, out: dir, redact, principal } => {
            let store = open_store(&cli.data_dir)?;
            let reg = load_registry(&cli.registry_dir)?;
            let who = match principal {
                Some(id) => Some(find_principal(&reg, id)?),
                None if *redact => Some(Principal::new("anonymous", Vec::<String>::new())),
                None => None,
            };
            let tags: TagSet = reg.tags.clone();
            let reader = who.as_ref().map(|p| Reader { principal: p, tags: &tags, at: Utc::now() });
            let summary = export_bundle(&store, run, dir, &ExportOptions { reader, redact: *redact })?;
            out.record(
                serde_json::to_value(&summary)?,
                format!("attestation={} objects={} redacted={}", summary.attestation, summary.objects, summary.redacted),
            );
        }
        Cmd::Verify { dir, workers } => {
            let report = verify_bundle(dir, *workers as usize)?;
            out.record(
                serde_json::to_value(&report)?,
                format!(
                    "reproduced={} redacted={} checked_objects={} mismatches={}",
                    report.reproduced,
                    report.redacted,
                    report.checked_objects,
                    report.mismatches.len()
                ),
            );
            if !out.json {
                for m in &report.mismatches {
                    println!("mismatch {}", serde_json::to_string(m)?);
                }
            }
            if !report.mismatches.is_empty() || !(report.reproduced || report.redacted) {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
