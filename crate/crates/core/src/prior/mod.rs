//! Prior knowledge: averaged uncached features, their trends, correction
//! priorities, plan selection and persistence.

mod extract;
mod priority;
pub mod store;
mod trend;

pub use extract::{extract, extraction_seed, PriorKnowledge, Provenance, RunRecording};
pub use priority::{
    omega_for_index_cap, priorities, priority, select_plan, select_plan_fraction, PriorityGrid,
};
pub use trend::{trend, TrendCell, TrendMode, TrendTable};
