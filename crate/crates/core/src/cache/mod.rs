//! Feature caching: schedules, optimization plans and the caching block
//! executor.

mod engine;
pub(crate) mod plan;
mod schedule;

pub use engine::{execute_block, execute_block_additive, CacheStore, CachedExecutor};
pub use plan::{Embedding, OptimizationPlan, Placement, PLAN_VERSION};
pub use schedule::{CacheSchedule, Decision, MaskFile, ScheduleOrigin};
