//! The transactional process meta-model: activities with ports, typed
//! products, dataflows, savepoints and recovery bindings.

mod graph;
mod types;
mod validate;

pub use graph::{compensation_chain, compensation_plan, execution_order, nearest_savepoint, CompensationStep};
pub(crate) use graph::span_start;
pub use types::*;
pub use validate::{validate, ValidatedProcess, Violation};

use crate::ids::ActivityId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("cycle detected at activity {0}")]
    CycleDetected(ActivityId),
    #[error("unknown activity {0}")]
    UnknownActivity(ActivityId),
    #[error("activity {0} is critical and effectful but has no compensation")]
    UncompensatableChain(ActivityId),
    #[error("savepoint {savepoint} does not precede {activity}")]
    SavepointNotBefore { savepoint: String, activity: ActivityId },
}
