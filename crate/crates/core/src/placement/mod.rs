//! Sub-model segmentation, capacity-aware placement and replica routing.

mod objective;
mod place;
mod segment;
mod types;

pub use objective::{
    expected_objective, monte_carlo_crossings, route_replica, ObjectiveWeights, PlacementObjective, PlanContext,
    DEFAULT_LOW_WATER_PCT,
};
pub use place::{assigned_bytes, brute_force_place, place, BRUTE_FORCE_LIMIT, MAX_LOCAL_SEARCH_MOVES};
pub use segment::{internal_mass, segment_submodels};
pub use types::{device_expert_budget, server_capacities, Placement, ReplicaSlot, Segmentation, SubModel};
