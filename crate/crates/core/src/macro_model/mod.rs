//! Accumulation-based parking dynamics on a single reservoir.
//!
//! Vehicles belong to one of six families: moving to an on-street target, moving to
//! the lot, passing through (including vehicles that finished parking), cruising for
//! an on-street spot, parked on street and parked off street.

mod dynamics;
mod nfd;

pub use dynamics::{
    macro_step, overflow, productions_and_outflows, redeparture_flows, redeparture_flows_uniform, simulate_macro,
    FlowHistory, Inflows, MacroDemand, MacroModel, MacroParams, MacroRecord, MacroState, MacroTrajectory, PriceProfile,
    StepFlows,
};
pub use nfd::{nfd_speed, split_demand, LogitParams, NfdModel};
