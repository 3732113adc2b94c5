//! Link-level parking simulator.
//!
//! Vehicles move on links at a Greenshields speed, capped on single-lane links by the
//! slowest cruiser. Parking searchers scan spots as they pass them, and every change of
//! parking family is written to an event log.

mod choice;
mod config;
mod events;
mod measure;
mod search;
mod sim;

pub use choice::{choose_parking_alternative, logit_probabilities, pick};
pub use config::{GridSpec, LotSpec, NetworkSpec, ScenarioConfig};
pub use events::{is_allowed_transition, Family, Location, ParkingEvent, ParkingEventLog};
pub use measure::{measure_nfd, nfd_from_run, performance_metrics, EdieSample, NfdPoint, PerformanceMetrics};
pub use search::{
    apply_regional_guidance, downstream_links, local_search_step, regional_decision, GuidanceConfig, RegionalDecision,
};
pub use sim::{run_on, run_scenario, MicroSim, RunOutput, StepStats, VehicleSummary};
