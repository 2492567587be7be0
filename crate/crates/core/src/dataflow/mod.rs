//! Declarative pipelines: documents, planning into per-tile tasks, memoized
//! execution and provenance.

mod doc;
mod exec;
mod plan;
mod provenance;

pub use doc::{valid_alias, InputSpec, NodeSpec, OpKind, PipelineDoc};
pub use exec::{
    execute, execute_plan, memo_key, DiffSummary, ExecOptions, NodeOutput, OutputKind, RunRecord, TaskRun, TaskStatus,
};
pub use plan::{plan, plan_with_sources, InputRef, NodeParams, NodePlan, Pinned, Plan, RasterShape, Task, TaskKind};
pub use provenance::{filter_provenance, provenance_of, ProvInput, ProvNode, TaskProv};

use crate::catalog::CatalogError;
use crate::expr::ExprError;
use crate::ops::OpError;
use crate::store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum DataflowError {
    #[error("invalid pipeline: {0}")]
    InvalidDoc(String),
    #[error("unknown alias {0}")]
    UnknownAlias(String),
    #[error("pipeline has a cycle through node {0}")]
    Cycle(String),
    #[error("{0} is not a raster")]
    NotARaster(String),
    #[error("principal may not declassify these tags")]
    Unauthorized,
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("corrupt task output: {0}")]
    Corrupt(String),
}
