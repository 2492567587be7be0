//! Core engine for a planetary-computing data platform.
//!
//! Geospatial layers are normalized into fixed 1024x1024 chunks, stored in a
//! content-addressed object store, tagged with information-flow labels, and
//! processed by declarative pipelines whose per-tile tasks are memoized by
//! content hash. Every derived object can be traced back to its sources and
//! exported as a self-verifying reproduction bundle.

pub mod canonical;
pub mod catalog;
pub mod dataflow;
pub mod difc;
pub mod expr;
pub mod geo;
pub mod ingest;
pub mod ops;
pub mod publish;
pub mod store;

pub use canonical::Digest;
pub use difc::{Label, Principal, Registry};
pub use geo::{Affine, Crs, GeoExtent, TileGrid, TILE_SIZE};
pub use store::{Chunk, ChunkRef, DType, LayerVersion, Store};

/// Semantic version of the engine, recorded in run records and bundles.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
