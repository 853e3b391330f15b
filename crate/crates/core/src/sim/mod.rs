//! Discrete-event engine, cost model, reports and dynamic updating.

mod cost;
mod engine;
mod event;
mod replan;
mod report;

pub use cost::CostModel;
pub use engine::{simulate, EventRecord, ResourceEvent, SimOutcome, SimSetup};
pub use event::EventKind;
pub use replan::{
    check_replan, migration_moves, precision_upgrade, MigrationMove, ReplanTriggerConfig, ResourceSnapshot,
    UpgradeSource,
};
pub use report::{LatencyParts, PagingSummary, RequestRecord, SimReport, TokenRecord, TrafficStats};
