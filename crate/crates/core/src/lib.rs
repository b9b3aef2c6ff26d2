//! Transactional deployment processes: a process model and its text format,
//! a simulated deployment world, an execution engine with forward and
//! backward recovery, and post-run consistency checks.

pub mod consistency;
pub mod engine;
pub mod ids;
pub mod model;
pub mod pml;
pub mod world;

pub use engine::{run, run_multi_site, ExecutionState, Outcome, RecoveryPolicy};
pub use ids::{ActivityId, PortId, ServerId, SiteId};
pub use model::{validate, ProcessDefinition, ValidatedProcess};
pub use world::{parse_scenario, Scenario, World};
